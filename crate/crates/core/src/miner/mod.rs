//! Bug-fix commit mining: history walk, patch trisection and pattern
//! matching against CI execution results.

mod executor;
mod trisect;

use std::fmt;

use chrono::{DateTime, FixedOffset, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use executor::{
    instrument_tree, prepare_variant, select_test_workflow, WorktreeExecutor, WorktreeExecutorConfig,
};
pub use trisect::{is_removal_only, trisect_diff, trisect_patch, PatchTriple};

use crate::adapters::{RunSummary, TestId, TestRun};
use crate::git::{Git, GitError};

#[derive(Debug, Error)]
pub enum MinerError {
    #[error(transparent)]
    Git(#[from] GitError),
    #[error("{0} is a shallow clone; fetch full history first (git fetch --unshallow)")]
    ShallowClone(String),
    #[error("invalid date window: {0}")]
    InvalidWindow(String),
    #[error("malformed diff: {0}")]
    Diff(String),
    #[error(transparent)]
    Runner(#[from] crate::runner::RunnerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, MinerError> {
        if start > end {
            return Err(MinerError::InvalidWindow(format!("{start} is after {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: &DateTime<FixedOffset>) -> bool {
        let day = t.with_timezone(&Utc).date_naive();
        self.start <= day && day <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitPair {
    pub previous: String,
    pub current: String,
    pub author_date: DateTime<FixedOffset>,
}

/// First-parent consecutive pairs of `rev`'s history whose current commit
/// was authored inside `window`, oldest first.
pub fn enumerate_pairs(git: &Git, rev: &str, window: &DateWindow) -> Result<Vec<CommitPair>, MinerError> {
    if git.is_shallow()? {
        return Err(MinerError::ShallowClone(git.dir().display().to_string()));
    }
    let mut pairs: Vec<CommitPair> = git
        .first_parent_log(rev)?
        .into_iter()
        .filter(|e| window.contains(&e.author_date))
        .filter_map(|e| {
            let previous = e.parents.first()?.clone();
            Some(CommitPair {
                previous,
                current: e.sha,
                author_date: e.author_date,
            })
        })
        .collect();
    pairs.reverse();
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Both versions pass; previous fails once the new tests are applied.
    PassPassWithTests,
    /// Previous fails, current passes, only source files changed.
    FailPassSourceOnly,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::PassPassWithTests => "pass_pass_with_tests",
            Pattern::FailPassSourceOnly => "fail_pass_source_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeVariant {
    Previous,
    Current,
    /// Previous tree plus the test and non-code patches.
    PreviousWithTestChanges,
}

impl fmt::Display for TreeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TreeVariant::Previous => "previous",
            TreeVariant::Current => "current",
            TreeVariant::PreviousWithTestChanges => "previous_with_tests",
        })
    }
}

/// What executing one tree variant produced.
#[derive(Debug, Clone)]
pub enum VariantResult {
    Report(TestRun),
    /// The workflow ran to the end but left no parseable report.
    NoReport(String),
    /// The variant could not be judged (runner failure, timeout, no
    /// workflow, patch conflict).
    Unrunnable(String),
}

pub trait VariantExecutor {
    fn execute(&mut self, pair: &CommitPair, triple: &PatchTriple, variant: TreeVariant)
        -> Result<VariantResult, MinerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugFixCandidate {
    pub repo: String,
    pub pair: CommitPair,
    pub pattern: Pattern,
    pub triple: PatchTriple,
    pub buggy_run: TestRun,
    pub fixed_run: TestRun,
    pub failing_tests: Vec<TestId>,
}

impl BugFixCandidate {
    /// `owner__repo__current_sha`.
    pub fn id(&self) -> String {
        entry_id(&self.repo, &self.pair.current)
    }
}

pub fn entry_id(repo: &str, current: &str) -> String {
    format!("{}__{current}", repo.replace('/', "__"))
}

#[derive(Debug, Clone)]
pub enum MatchOutcome {
    Candidate(Box<BugFixCandidate>),
    /// Evidence rules the pair out.
    Rejected(String),
    /// A required variant could not be executed.
    Skipped(String),
}

impl MatchOutcome {
    pub fn candidate(self) -> Option<BugFixCandidate> {
        match self {
            MatchOutcome::Candidate(c) => Some(*c),
            _ => None,
        }
    }
}

macro_rules! run_or_skip {
    ($exec:expr, $pair:expr, $triple:expr, $variant:expr) => {
        match $exec.execute($pair, $triple, $variant)? {
            VariantResult::Unrunnable(reason) => {
                return Ok(MatchOutcome::Skipped(format!("{}: {reason}", $variant)))
            }
            other => other,
        }
    };
}

/// Checks the two bug-fix patterns, Pattern 1 first.
///
/// Patch shapes are checked before anything runs. Current is executed
/// first since both patterns need it passing.
pub fn match_patterns(
    repo: &str,
    pair: &CommitPair,
    triple: &PatchTriple,
    exec: &mut dyn VariantExecutor,
) -> Result<MatchOutcome, MinerError> {
    let has_source = !triple.source_patch.is_empty();
    let has_test = !triple.test_patch.is_empty();
    let p1_shape = has_source && has_test && !is_removal_only(&triple.source_patch) && !is_removal_only(&triple.test_patch);
    let p2_shape = has_source && !has_test;
    if !p1_shape && !p2_shape {
        let reason = match (has_source, has_test) {
            (false, false) => "non_code_only",
            (false, true) => "test_only",
            _ if is_removal_only(&triple.test_patch) => "test_patch_removal_only",
            _ => "source_patch_removal_only",
        };
        return Ok(MatchOutcome::Rejected(reason.into()));
    }

    let fixed_run = match run_or_skip!(exec, pair, triple, TreeVariant::Current) {
        VariantResult::Report(r) if r.is_passing() => r,
        VariantResult::Report(_) => return Ok(MatchOutcome::Rejected("current_not_passing".into())),
        _ => return Ok(MatchOutcome::Rejected("current_without_report".into())),
    };
    let previous = run_or_skip!(exec, pair, triple, TreeVariant::Previous);

    let (pattern, buggy_run) = if p1_shape {
        match previous {
            VariantResult::Report(r) if r.is_passing() => {}
            _ => return Ok(MatchOutcome::Rejected("previous_not_passing".into())),
        }
        match run_or_skip!(exec, pair, triple, TreeVariant::PreviousWithTestChanges) {
            VariantResult::Report(r) if r.has_failures() => (Pattern::PassPassWithTests, r),
            VariantResult::Report(_) => {
                return Ok(MatchOutcome::Rejected("tests_do_not_fail_previous".into()))
            }
            _ => return Ok(MatchOutcome::Rejected("previous_with_tests_without_report".into())),
        }
    } else {
        match previous {
            VariantResult::Report(r) if r.has_failures() => (Pattern::FailPassSourceOnly, r),
            VariantResult::Report(_) => return Ok(MatchOutcome::Rejected("previous_not_failing".into())),
            _ => return Ok(MatchOutcome::Rejected("previous_without_report".into())),
        }
    };
    let failing_tests = buggy_run.failing_tests();
    Ok(MatchOutcome::Candidate(Box::new(BugFixCandidate {
        repo: repo.to_string(),
        pair: pair.clone(),
        pattern,
        triple: triple.clone(),
        buggy_run,
        fixed_run,
        failing_tests,
    })))
}

/// File names of the three patches inside a candidate or entry directory.
pub const PATCH_FILES: [&str; 3] = ["source.patch", "test.patch", "non_code.patch"];

/// One JSON line per accepted candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub repo: String,
    pub previous_sha: String,
    pub current_sha: String,
    pub pattern: Pattern,
    /// Relative to the candidates directory.
    pub patch_files: Vec<String>,
    pub failing_tests: Vec<TestId>,
    pub buggy_run: RunSummary,
    pub fixed_run: RunSummary,
}

impl CandidateRecord {
    pub fn new(c: &BugFixCandidate) -> Self {
        let id = c.id();
        Self {
            patch_files: PATCH_FILES.iter().map(|f| format!("{id}/{f}")).collect(),
            id,
            repo: c.repo.clone(),
            previous_sha: c.pair.previous.clone(),
            current_sha: c.pair.current.clone(),
            pattern: c.pattern,
            failing_tests: c.failing_tests.clone(),
            buggy_run: c.buggy_run.summary(),
            fixed_run: c.fixed_run.summary(),
        }
    }
}
