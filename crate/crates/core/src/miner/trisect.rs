use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CommitPair, MinerError};
use crate::adapters::{BuildAdapter, FileClass};
use crate::git::Git;

/// A commit's diff split by file class. Each patch is a concatenation of
/// whole per-file `git diff` sections.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTriple {
    pub source_patch: String,
    pub test_patch: String,
    pub non_code_patch: String,
    pub source_files: Vec<String>,
    pub test_files: Vec<String>,
    pub non_code_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl PatchTriple {
    pub fn all_files(&self) -> BTreeSet<&str> {
        self.source_files
            .iter()
            .chain(&self.test_files)
            .chain(&self.non_code_files)
            .map(String::as_str)
            .collect()
    }

    fn push(&mut self, class: FileClass, path: String, section: &str) {
        let (patch, files) = match class {
            FileClass::Source => (&mut self.source_patch, &mut self.source_files),
            FileClass::Test => (&mut self.test_patch, &mut self.test_files),
            FileClass::NonCode => (&mut self.non_code_patch, &mut self.non_code_files),
        };
        patch.push_str(section);
        files.push(path);
    }
}

/// Splits `previous..current` into source, test and non-code patches.
pub fn trisect_patch(git: &Git, pair: &CommitPair, adapter: &dyn BuildAdapter) -> Result<PatchTriple, MinerError> {
    let changed = git.changed_paths(&pair.previous, &pair.current)?;
    let diff = git.diff(&pair.previous, &pair.current, &[])?;
    trisect_diff(&diff, &changed, adapter, |path| {
        git.diff_forced_binary(&pair.previous, &pair.current, path)
            .map_err(MinerError::from)
    })
}

/// Routes each section of a `git diff --binary --no-renames` output by the
/// class of its path. Sections that are not valid UTF-8 are re-fetched
/// through `rediff_binary`, which must return an ASCII binary patch.
pub fn trisect_diff(
    diff: &[u8],
    changed: &[String],
    adapter: &dyn BuildAdapter,
    rediff_binary: impl Fn(&str) -> Result<Vec<u8>, MinerError>,
) -> Result<PatchTriple, MinerError> {
    let mut triple = PatchTriple::default();
    let mut seen = BTreeSet::new();
    for raw in split_sections(diff) {
        let header_end = raw.iter().position(|b| *b == b'\n').unwrap_or(raw.len());
        let header = std::str::from_utf8(&raw[..header_end])
            .map_err(|_| MinerError::Diff("diff header is not UTF-8".into()))?;
        let path = section_path(header)
            .ok_or_else(|| MinerError::Diff(format!("cannot parse diff header {header:?}")))?;
        let mut forced = false;
        let section = match String::from_utf8(raw.to_vec()) {
            Ok(s) => s,
            Err(_) => {
                forced = true;
                let bin = rediff_binary(&path)?;
                let s = String::from_utf8(bin)
                    .map_err(|_| MinerError::Diff(format!("binary patch for {path} is not ASCII")))?;
                triple.notes.push(format!("{path}: non-UTF-8 text stored as a binary patch"));
                s
            }
        };
        let class = if !forced && is_binary_section(&section) {
            triple.notes.push(format!("{path}: binary file routed to the non-code patch"));
            FileClass::NonCode
        } else {
            adapter.classify_file(&path)
        };
        seen.insert(path.clone());
        triple.push(class, path, &section);
    }
    let expected: BTreeSet<String> = changed.iter().cloned().collect();
    if seen != expected {
        let missing: Vec<_> = expected.difference(&seen).collect();
        let extra: Vec<_> = seen.difference(&expected).collect();
        return Err(MinerError::Diff(format!(
            "diff sections do not match changed files (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    Ok(triple)
}

fn split_sections(diff: &[u8]) -> Vec<&[u8]> {
    const HEADER: &[u8] = b"diff --git ";
    let mut starts = Vec::new();
    let mut at_line_start = true;
    for (i, b) in diff.iter().enumerate() {
        if at_line_start && diff[i..].starts_with(HEADER) {
            starts.push(i);
        }
        at_line_start = *b == b'\n';
    }
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let end = starts.get(k + 1).copied().unwrap_or(diff.len());
            &diff[s..end]
        })
        .collect()
}

fn is_binary_section(section: &str) -> bool {
    section
        .lines()
        .any(|l| l == "GIT binary patch" || (l.starts_with("Binary files ") && l.ends_with(" differ")))
}

/// The path of a `diff --git a/P b/P` header. With renames disabled both
/// sides name the same path, which resolves the ambiguity of unquoted
/// paths containing spaces.
pub(crate) fn section_path(header: &str) -> Option<String> {
    let rest = header.strip_prefix("diff --git ")?;
    if rest.starts_with('"') {
        let (a, tail) = unquote(rest)?;
        let tail = tail.strip_prefix(' ')?;
        let b = if tail.starts_with('"') { unquote(tail)?.0 } else { tail.to_string() };
        let a = a.strip_prefix("a/")?.to_string();
        return (b.strip_prefix("b/") == Some(a.as_str())).then_some(a);
    }
    if rest.len() < 5 || (rest.len() - 5) % 2 != 0 {
        return None;
    }
    let n = (rest.len() - 5) / 2;
    let a = rest.get(2..2 + n)?;
    (rest.starts_with("a/") && rest.get(2 + n..)? == format!(" b/{a}")).then(|| a.to_string())
}

/// Decodes a leading C-style quoted string, returning it and the remainder.
fn unquote(s: &str) -> Option<(String, &str)> {
    let bytes = s.as_bytes();
    if bytes.first() != Some(&b'"') {
        return None;
    }
    let mut out = Vec::new();
    let mut i = 1;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => return Some((String::from_utf8(out).ok()?, &s[i + 1..])),
            b'\\' => {
                let c = *bytes.get(i + 1)?;
                i += 2;
                match c {
                    b'n' => out.push(b'\n'),
                    b't' => out.push(b'\t'),
                    b'r' => out.push(b'\r'),
                    b'a' => out.push(0x07),
                    b'b' => out.push(0x08),
                    b'f' => out.push(0x0c),
                    b'v' => out.push(0x0b),
                    b'0'..=b'7' => {
                        let digits = bytes.get(i - 1..i + 2)?;
                        let v = std::str::from_utf8(digits).ok()?;
                        out.push(u8::from_str_radix(v, 8).ok()?);
                        i += 2;
                    }
                    other => out.push(other),
                }
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    None
}

/// True iff no hunk of `patch` adds a line. Binary sections count as
/// additions unless they delete the file.
pub fn is_removal_only(patch: &str) -> bool {
    let mut in_hunk = false;
    let mut deleting = false;
    for line in patch.lines() {
        if line.starts_with("diff --git ") {
            in_hunk = false;
            deleting = false;
        } else if !in_hunk && line.starts_with("deleted file mode") {
            deleting = true;
        } else if !in_hunk && line == "GIT binary patch" && !deleting {
            return false;
        } else if line.starts_with("@@") {
            in_hunk = true;
        } else if in_hunk && line.starts_with('+') {
            return false;
        }
    }
    true
}
