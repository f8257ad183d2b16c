//! Thin wrapper over the `git` command line.

use std::ffi::OsStr;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use chrono::{DateTime, FixedOffset};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GitError {
    #[error("failed to run git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("git {args} failed ({code}): {stderr}")]
    Failed {
        args: String,
        code: i32,
        stderr: String,
    },
    #[error("unexpected git output: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub sha: String,
    pub parents: Vec<String>,
    pub author_date: DateTime<FixedOffset>,
}

/// A repository (or worktree) on disk.
#[derive(Debug, Clone)]
pub struct Git {
    dir: PathBuf,
}

fn base_command() -> Command {
    let mut cmd = Command::new("git");
    cmd.args([
        "-c",
        "core.quotePath=false",
        "-c",
        "advice.detachedHead=false",
        "-c",
        "core.autocrlf=false",
    ]);
    cmd.env("GIT_TERMINAL_PROMPT", "0");
    cmd.env_remove("GIT_DIR");
    cmd.env_remove("GIT_WORK_TREE");
    cmd.env_remove("GIT_INDEX_FILE");
    cmd
}

fn run_command(mut cmd: Command, stdin: Option<&[u8]>) -> Result<Vec<u8>, GitError> {
    let args = format!("{:?}", cmd.get_args().collect::<Vec<&OsStr>>());
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
    if stdin.is_some() {
        cmd.stdin(Stdio::piped());
    } else {
        cmd.stdin(Stdio::null());
    }
    let mut child = cmd.spawn()?;
    if let Some(input) = stdin {
        // dropped at end of scope, closing the pipe
        let mut handle = child.stdin.take().expect("piped stdin");
        handle.write_all(input)?;
    }
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(GitError::Failed {
            args,
            code: out.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(out.stdout)
}

fn to_string(bytes: Vec<u8>) -> Result<String, GitError> {
    String::from_utf8(bytes).map_err(|e| GitError::Parse(e.to_string()))
}

/// Local paths are turned into `file://` URLs so that `--depth` is honoured.
fn clone_source(url: &str) -> String {
    let p = Path::new(url);
    if p.exists() {
        let abs = p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
        format!("file://{}", abs.display())
    } else {
        url.to_string()
    }
}

impl Git {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn command(&self) -> Command {
        let mut cmd = base_command();
        cmd.arg("-C").arg(&self.dir);
        cmd
    }

    pub fn run<I, S>(&self, args: I) -> Result<String, GitError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let mut cmd = self.command();
        cmd.args(args);
        to_string(run_command(cmd, None)?)
    }

    fn run_bytes<I, S>(&self, args: I) -> Result<Vec<u8>, GitError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let mut cmd = self.command();
        cmd.args(args);
        run_command(cmd, None)
    }

    pub fn init(dir: &Path) -> Result<Self, GitError> {
        std::fs::create_dir_all(dir)?;
        let git = Self::open(dir);
        git.run(["init", "-q", "-b", "main"])?;
        Ok(git)
    }

    /// Shallow clone of one branch's tip.
    pub fn clone_shallow(url: &str, branch: Option<&str>, dest: &Path) -> Result<Self, GitError> {
        let mut cmd = base_command();
        cmd.args(["clone", "-q", "--depth", "1", "--single-branch"]);
        if let Some(b) = branch {
            cmd.args(["--branch", b]);
        }
        cmd.arg(clone_source(url)).arg(dest);
        run_command(cmd, None)?;
        Ok(Self::open(dest))
    }

    /// Full-history clone.
    pub fn clone_full(url: &str, dest: &Path) -> Result<Self, GitError> {
        let mut cmd = base_command();
        cmd.args(["clone", "-q", "--no-local"]);
        cmd.arg(clone_source(url)).arg(dest);
        run_command(cmd, None)?;
        Ok(Self::open(dest))
    }

    /// Clone without a checkout; local sources are hardlinked.
    pub fn clone_no_checkout(url: &str, dest: &Path) -> Result<Self, GitError> {
        let mut cmd = base_command();
        cmd.args(["clone", "-q", "--no-checkout"]);
        cmd.arg(url).arg(dest);
        run_command(cmd, None)?;
        Ok(Self::open(dest))
    }

    pub fn is_shallow(&self) -> Result<bool, GitError> {
        Ok(self.run(["rev-parse", "--is-shallow-repository"])?.trim() == "true")
    }

    pub fn rev_parse(&self, rev: &str) -> Result<String, GitError> {
        Ok(self.run(["rev-parse", "--verify", "--quiet", rev])?.trim().to_string())
    }

    pub fn head(&self) -> Result<String, GitError> {
        self.rev_parse("HEAD")
    }

    pub fn has_commit(&self, sha: &str) -> bool {
        self.run(["cat-file", "-e", &format!("{sha}^{{commit}}")]).is_ok()
    }

    pub fn tree_of(&self, rev: &str) -> Result<String, GitError> {
        self.rev_parse(&format!("{rev}^{{tree}}"))
    }

    /// First-parent history of `rev`, newest first.
    pub fn first_parent_log(&self, rev: &str) -> Result<Vec<LogEntry>, GitError> {
        let out = self.run(["log", "--first-parent", "--format=%H%x1f%P%x1f%aI", rev, "--"])?;
        out.lines()
            .filter(|l| !l.is_empty())
            .map(|line| {
                let mut parts = line.split('\x1f');
                let sha = parts.next().unwrap_or_default().to_string();
                let parents = parts
                    .next()
                    .unwrap_or_default()
                    .split_whitespace()
                    .map(str::to_string)
                    .collect();
                let date = parts.next().unwrap_or_default();
                let author_date = DateTime::parse_from_rfc3339(date)
                    .map_err(|e| GitError::Parse(format!("author date {date:?}: {e}")))?;
                Ok(LogEntry {
                    sha,
                    parents,
                    author_date,
                })
            })
            .collect()
    }

    /// Paths changed between two commits, renames split into delete + add.
    pub fn changed_paths(&self, from: &str, to: &str) -> Result<Vec<String>, GitError> {
        let out = self.run_bytes([
            "diff",
            "--name-only",
            "-z",
            "--no-renames",
            "--no-ext-diff",
            from,
            to,
            "--",
        ])?;
        out.split(|b| *b == 0)
            .filter(|p| !p.is_empty())
            .map(|p| to_string(p.to_vec()))
            .collect()
    }

    /// Full-index binary-capable diff, renames disabled.
    pub fn diff(&self, from: &str, to: &str, paths: &[&str]) -> Result<Vec<u8>, GitError> {
        let mut args: Vec<&str> = vec![
            "diff",
            "--binary",
            "--full-index",
            "--no-renames",
            "--no-color",
            "--no-ext-diff",
            "--no-textconv",
            "--src-prefix=a/",
            "--dst-prefix=b/",
            from,
            to,
            "--",
        ];
        args.extend_from_slice(paths);
        self.run_bytes(args)
    }

    /// Like [`Git::diff`] for one path, forcing a binary patch (pure ASCII).
    pub fn diff_forced_binary(&self, from: &str, to: &str, path: &str) -> Result<Vec<u8>, GitError> {
        let attrs = tempfile_path("attrs")?;
        std::fs::write(&attrs, format!("{} -diff\n", glob_escape(path)))?;
        let attrs_cfg = format!("core.attributesFile={}", attrs.display());
        let res = self.run_bytes([
            "-c",
            &attrs_cfg,
            "diff",
            "--binary",
            "--full-index",
            "--no-renames",
            "--no-color",
            "--no-ext-diff",
            "--src-prefix=a/",
            "--dst-prefix=b/",
            from,
            to,
            "--",
            path,
        ]);
        let _ = std::fs::remove_file(&attrs);
        res
    }

    /// Applies a patch to the working tree.
    pub fn apply(&self, patch: &str) -> Result<(), GitError> {
        if patch.trim().is_empty() {
            return Ok(());
        }
        let mut cmd = self.command();
        cmd.args(["apply", "--binary", "--whitespace=nowarn", "-"]);
        run_command(cmd, Some(patch.as_bytes()))?;
        Ok(())
    }

    /// Hash of the tree currently in the working directory, computed through
    /// a throwaway index seeded from HEAD so tracked-but-ignored files count.
    pub fn worktree_tree_hash(&self) -> Result<String, GitError> {
        let index = tempfile_path("index")?;
        let run = |args: &[&str]| -> Result<String, GitError> {
            let mut cmd = self.command();
            cmd.env("GIT_INDEX_FILE", &index);
            cmd.args(args);
            to_string(run_command(cmd, None)?)
        };
        let result = (|| {
            run(&["read-tree", "HEAD"])?;
            run(&["add", "-A", "."])?;
            Ok(run(&["write-tree"])?.trim().to_string())
        })();
        let _ = std::fs::remove_file(&index);
        result
    }

    /// Detached checkout of `sha` with all untracked and ignored files removed.
    pub fn checkout_clean(&self, sha: &str) -> Result<(), GitError> {
        self.run(["checkout", "-q", "-f", "--detach", sha])?;
        self.run(["clean", "-q", "-ffdx"])?;
        Ok(())
    }

    pub fn worktree_add(&self, dest: &Path, sha: &str) -> Result<Git, GitError> {
        let dest_s = dest.to_string_lossy().to_string();
        self.run(["worktree", "add", "-q", "--detach", "-f", &dest_s, sha])?;
        Ok(Git::open(dest))
    }

    pub fn worktree_remove(&self, dest: &Path) -> Result<(), GitError> {
        let dest_s = dest.to_string_lossy().to_string();
        self.run(["worktree", "remove", "--force", &dest_s])?;
        Ok(())
    }
}

fn glob_escape(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    for c in path.chars() {
        if matches!(c, '*' | '?' | '[' | '\\' | ' ' | '#' | '!') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn tempfile_path(kind: &str) -> std::io::Result<PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    Ok(std::env::temp_dir().join(format!(
        "bugharvest-git-{kind}-{}-{n}",
        std::process::id()
    )))
}
