use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::miner::{MatchOutcome, Pattern};
use crate::store::{BenchmarkEntry, VerificationReport};

/// Append-only JSON-lines log shared by the workers of one stage.
pub struct JsonlWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlWriter {
    /// Opens for appending. A partial trailing line left by an interrupted
    /// writer is cut off first.
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        let io = |e| PipelineError::io(path, e);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io)?;
        let bytes = fs::read(path).map_err(io)?;
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
            tracing::warn!(path = %path.display(), "dropped a truncated trailing line");
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append<T: Serialize>(&self, value: &T) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(value).expect("state record serializes");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line).map_err(|e| PipelineError::io(&self.path, e))?;
        f.flush().map_err(|e| PipelineError::io(&self.path, e))
    }
}

/// Reads a JSON-lines file; a missing file is empty. Only a final line
/// lacking its newline may be unparsable, and it is ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!(path = %path.display(), "ignoring truncated trailing line");
            }
            Err(e) => {
                return Err(PipelineError::State(format!("{}:{}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

/// Writes `lines` as the whole file, atomically.
pub fn rewrite_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<(), PipelineError> {
    let mut out = Vec::new();
    for l in lines {
        out.extend(serde_json::to_vec(l).expect("state record serializes"));
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |e| PipelineError::io(path, e);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairVerdict {
    Candidate,
    Rejected,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub previous: String,
    pub current: String,
    pub verdict: PairVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PairRecord {
    pub fn from_outcome(previous: &str, current: &str, outcome: &MatchOutcome) -> Self {
        let (verdict, pattern, reason) = match outcome {
            MatchOutcome::Candidate(c) => (PairVerdict::Candidate, Some(c.pattern), None),
            MatchOutcome::Rejected(r) => (PairVerdict::Rejected, None, Some(r.clone())),
            MatchOutcome::Skipped(r) => (PairVerdict::Skipped, None, Some(r.clone())),
        };
        Self {
            previous: previous.into(),
            current: current.into(),
            verdict,
            pattern,
            reason,
        }
    }
}

/// All pairs of one repository, written once the repository is finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedRepo {
    pub repo: String,
    pub pairs: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<String>,
    /// Patches are not serialized; they live in the candidate directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<BenchmarkEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub id: String,
    pub report: VerificationReport,
}

/// One machine-readable skip, rejection or drop.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipRecord {
    pub stage: String,
    pub subject: String,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        n: u32,
    }

    #[test]
    fn truncated_tail_is_ignored_and_repaired() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.jsonl");
        assert!(read_jsonl::<Row>(&p).unwrap().is_empty());
        fs::write(&p, "{\"n\":1}\n{\"n\":2}\n{\"n\":").unwrap();
        assert_eq!(read_jsonl::<Row>(&p).unwrap(), [Row { n: 1 }, Row { n: 2 }]);
        let w = JsonlWriter::open(&p).unwrap();
        w.append(&Row { n: 3 }).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "{\"n\":1}\n{\"n\":2}\n{\"n\":3}\n");
    }

    #[test]
    fn corruption_before_the_tail_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.jsonl");
        fs::write(&p, "{\"n\":1}\nnot json\n{\"n\":2}\n").unwrap();
        assert!(read_jsonl::<Row>(&p).is_err());
        // a complete final line must parse too
        fs::write(&p, "{\"n\":1}\n{\"n\"\n").unwrap();
        assert!(read_jsonl::<Row>(&p).is_err());
    }
}
