//! Deterministic git repositories for tests and demos.
//!
//! Commits use a fixed identity and caller-supplied dates, so the same
//! sequence of operations always yields the same SHAs.

use std::fs;
use std::path::Path;
use std::process::Command;

use crate::adapters::TestId;
use crate::collector::RepositoryRecord;
use crate::git::{Git, GitError};
use crate::miner::Pattern;

pub struct RepoBuilder {
    git: Git,
}

impl RepoBuilder {
    pub fn init(dir: &Path) -> Result<Self, GitError> {
        Ok(Self { git: Git::init(dir)? })
    }

    pub fn dir(&self) -> &Path {
        self.git.dir()
    }

    pub fn git(&self) -> &Git {
        &self.git
    }

    pub fn write(&self, path: &str, content: impl AsRef<[u8]>) -> &Self {
        let p = self.dir().join(path);
        fs::create_dir_all(p.parent().expect("file path has a parent")).expect("create parent dir");
        fs::write(p, content).expect("write fixture file");
        self
    }

    pub fn remove(&self, path: &str) -> &Self {
        let p = self.dir().join(path);
        if p.is_dir() {
            fs::remove_dir_all(p).expect("remove fixture dir");
        } else {
            fs::remove_file(p).expect("remove fixture file");
        }
        self
    }

    pub fn read(&self, path: &str) -> String {
        fs::read_to_string(self.dir().join(path)).expect("read fixture file")
    }

    fn run(&self, args: &[&str], date: &str) -> Result<String, GitError> {
        let out = Command::new("git")
            .arg("-C")
            .arg(self.dir())
            .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com"])
            .args(["-c", "commit.gpgsign=false", "-c", "core.autocrlf=false"])
            .args(args)
            .env("GIT_AUTHOR_DATE", date)
            .env("GIT_COMMITTER_DATE", date)
            .env_remove("GIT_DIR")
            .env_remove("GIT_INDEX_FILE")
            .output()?;
        if !out.status.success() {
            return Err(GitError::Failed {
                args: args.join(" "),
                code: out.status.code().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&out.stderr).into(),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    /// Stages everything and commits; returns the new SHA. `date` is RFC 3339.
    pub fn commit(&self, message: &str, date: &str) -> Result<String, GitError> {
        self.git.run(["add", "-A", "."])?;
        self.run(&["commit", "-q", "--allow-empty", "-m", message], date)?;
        self.git.head()
    }

    pub fn checkout(&self, rev: &str) -> Result<(), GitError> {
        self.git.run(["checkout", "-q", rev]).map(|_| ())
    }

    pub fn branch(&self, name: &str) -> Result<(), GitError> {
        self.git.run(["checkout", "-q", "-b", name]).map(|_| ())
    }

    /// Non-fast-forward merge of `branch` into the current branch.
    pub fn merge(&self, branch: &str, date: &str) -> Result<String, GitError> {
        self.run(&["merge", "-q", "--no-ff", "-m", &format!("merge {branch}"), branch], date)?;
        self.git.head()
    }
}

/// The Go CI workflow used by simulated repositories.
pub const GO_WORKFLOW: &str = "name: CI
on:
  push:
    branches: [main]
  pull_request:
jobs:
  test:
    runs-on: ${{ matrix.os }}
    strategy:
      matrix:
        os: [ubuntu-22.04, macos-13]
        go: ['1.21', '1.20']
    steps:
      - uses: actions/checkout@v4
      - uses: actions/setup-go@v5
        with:
          go-version: ${{ matrix.go }}
      - run: go build ./...
      - run: go test -v ./...
  release:
    needs: test
    runs-on: ubuntu-latest
    steps:
      - run: ./scripts/release.sh
";

/// A Go repository skeleton with a module file and the CI workflow.
pub fn go_skeleton(b: &RepoBuilder, module: &str) {
    b.write("go.mod", format!("module {module}\n\ngo 1.21\n"));
    b.write(".github/workflows/ci.yml", GO_WORKFLOW);
    b.write("README.md", format!("# {module}\n"));
}

/// A positive pair of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedCandidate {
    pub repo: String,
    pub previous: String,
    pub current: String,
    pub pattern: Pattern,
    pub failing_tests: Vec<TestId>,
}

/// A negative pair and the rejection or skip it must receive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedNegative {
    pub repo: String,
    pub current: String,
    pub kind: &'static str,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    /// Seed records; `clone_url` is the local repository path.
    pub repos: Vec<RepositoryRecord>,
    pub positives: Vec<ExpectedCandidate>,
    pub negatives: Vec<ExpectedNegative>,
}

impl SyntheticCorpus {
    pub fn pair_count(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

const ROOT_DATE: &str = "2022-12-30T12:00:00Z";

fn day(n: u32) -> String {
    format!("2023-01-{n:02}T10:00:00Z")
}

/// Three Go repositories with 12 first-parent commit pairs dated January
/// 2023: two of each pattern and eight negatives. `root` must not contain
/// the repositories yet. SHAs are identical across calls.
pub fn synthetic_corpus(root: &Path) -> Result<SyntheticCorpus, GitError> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut repos = Vec::new();
    let mut pos = |repo: &str, previous: &str, current: &str, pattern, suite: &str, tests: &[&str]| {
        positives.push(ExpectedCandidate {
            repo: repo.into(),
            previous: previous.into(),
            current: current.into(),
            pattern,
            failing_tests: tests.iter().map(|t| TestId::new(suite, *t)).collect(),
        })
    };
    let mut neg = |repo: &str, current: &str, kind| {
        negatives.push(ExpectedNegative {
            repo: repo.into(),
            current: current.into(),
            kind,
        })
    };

    // alpha: healthy from the start
    let name = "corpus/alpha";
    let module = "example.com/alpha";
    let b = RepoBuilder::init(&root.join("alpha"))?;
    go_skeleton(&b, module);
    b.write("calc.go", "package alpha\n\n//sim:provide add=ok\nfunc Add(a, b int) int { return a + b }\n");
    b.write("calc_test.go", "package alpha\n\n//sim:test TestAdd add=ok\n");
    let prev = b.commit("initial", ROOT_DATE)?;

    b.write("calc.go", b.read("calc.go") + "\n//sim:provide mul=ok\nfunc Mul(a, b int) int { return a * b }\n");
    b.write("calc_test.go", b.read("calc_test.go") + "// multiplication cases\n//sim:test TestMul mul=ok\n");
    let c = b.commit("add Mul with tests", &day(2))?;
    pos(name, &prev, &c, Pattern::PassPassWithTests, module, &["TestMul"]);

    b.write("README.md", format!("# {module}\n\nArithmetic helpers.\n"));
    b.write("docs/usage.md", "Call Add.\n");
    let c = b.commit("docs", &day(3))?;
    neg(name, &c, "non_code_only");

    b.write("calc.go", b.read("calc.go") + "\n// Sub is not implemented yet.\n");
    let c = b.commit("comment", &day(4))?;
    neg(name, &c, "previous_not_failing");

    b.write("calc.go", b.read("calc.go").replace("add=ok", "add=broken"));
    let c = b.commit("refactor Add", &day(5))?;
    neg(name, &c, "current_not_passing");
    let prev = c;

    b.write("calc.go", b.read("calc.go").replace("add=broken", "add=ok"));
    let c = b.commit("fix Add regression", &day(6))?;
    pos(name, &prev, &c, Pattern::FailPassSourceOnly, module, &["TestAdd"]);

    b.write("calc_test.go", b.read("calc_test.go").replace("// multiplication cases\n", ""));
    b.write("calc.go", b.read("calc.go") + "// Div is planned.\n");
    let c = b.commit("tidy", &day(7))?;
    neg(name, &c, "test_patch_removal_only");

    b.write("calc_test.go", b.read("calc_test.go") + "//sim:test TestAddZero\n");
    let c = b.commit("more tests", &day(8))?;
    neg(name, &c, "test_only");
    repos.push(seed(name, b.dir()));

    // beta: the initial commit crashes before writing a report
    let name = "corpus/beta";
    let module = "example.com/beta";
    let b = RepoBuilder::init(&root.join("beta"))?;
    go_skeleton(&b, module);
    b.write("beta.go", "package beta\n\n//sim:crash\n//sim:provide x=1\n");
    b.write("beta_test.go", "package beta\n\n//sim:test TestX x=1\n");
    b.commit("initial", ROOT_DATE)?;

    b.write("beta.go", b.read("beta.go").replace("//sim:crash\n", "// init order fixed\n"));
    let c = b.commit("fix init crash", &day(10))?;
    neg(name, &c, "previous_without_report");
    let prev = c;

    b.write("beta.go", b.read("beta.go") + "//sim:provide y=1\n");
    b.write("beta_test.go", b.read("beta_test.go") + "//sim:test TestY y=1\n");
    let c = b.commit("support y", &day(11))?;
    pos(name, &prev, &c, Pattern::PassPassWithTests, module, &["TestY"]);

    b.write("beta.go", b.read("beta.go").replace("x=1", "x=2"));
    let c = b.commit("change x", &day(12))?;
    neg(name, &c, "current_not_passing");
    let prev = c;

    b.write("beta.go", b.read("beta.go").replace("x=2", "x=1"));
    let c = b.commit("restore x", &day(13))?;
    pos(name, &prev, &c, Pattern::FailPassSourceOnly, module, &["TestX"]);
    repos.push(seed(name, b.dir()));

    // gamma: a test that fails on every second run
    let name = "corpus/gamma";
    let module = "example.com/gamma";
    let b = RepoBuilder::init(&root.join("gamma"))?;
    go_skeleton(&b, module);
    b.write("gamma.go", "package gamma\n\n//sim:provide z=1\n");
    b.write("gamma_test.go", "package gamma\n\n//sim:test TestZ z=1\n//sim:test TestClock\n//sim:flaky TestClock\n");
    b.commit("initial", ROOT_DATE)?;

    b.write("gamma.go", b.read("gamma.go") + "//sim:provide w=1\n");
    b.write("gamma_test.go", b.read("gamma_test.go") + "//sim:test TestW w=1\n");
    let c = b.commit("support w", &day(20))?;
    neg(name, &c, "flaky");
    repos.push(seed(name, b.dir()));

    Ok(SyntheticCorpus {
        repos,
        positives,
        negatives,
    })
}

fn seed(full_name: &str, dir: &Path) -> RepositoryRecord {
    RepositoryRecord {
        full_name: full_name.into(),
        clone_url: dir.display().to_string(),
        stars: 120,
        size_kb: 64,
        default_branch: "main".into(),
        language: Some("Go".into()),
        probe: None,
    }
}
