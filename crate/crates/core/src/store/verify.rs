use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_image, io_err, run_offline, BenchmarkEntry, Mode, ReproducerConfig, StoreError};
use crate::adapters::{BuildAdapter, OutcomeKey, TestRun};
use crate::git::Git;
use crate::miner::prepare_variant;
use crate::runner::{ExecutionStatus, NetworkMode, Runner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Flaky,
    OfflineFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRun {
    pub mode: Mode,
    /// 1-based.
    pub attempt: usize,
    pub network: NetworkMode,
    pub status: ExecutionStatus,
    pub test_run: Option<TestRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl VerificationRun {
    pub fn outcome(&self) -> Option<Vec<OutcomeKey>> {
        self.test_run.as_ref().map(TestRun::outcome_multiset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub id: String,
    pub k: usize,
    pub runs: Vec<VerificationRun>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl VerificationReport {
    pub fn first_run(&self, mode: Mode) -> Option<&TestRun> {
        self.runs
            .iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.test_run.as_ref())
    }

    /// The entry with expectations taken from the verified runs.
    pub fn finalize(&self, draft: &BenchmarkEntry) -> Option<BenchmarkEntry> {
        if self.verdict != Verdict::Stable {
            return None;
        }
        let buggy = self.first_run(Mode::Buggy)?;
        let fixed = self.first_run(Mode::Fixed)?;
        let mut entry = draft.clone();
        entry.expected_buggy = buggy.outcome_multiset();
        entry.expected_fixed = fixed.outcome_multiset();
        entry.failing_tests = buggy.failing_tests();
        Some(entry)
    }
}

/// Executes the buggy and fixed versions `k` times each, alternating, every
/// run offline from the frozen image in a freshly cleaned checkout. Stops at
/// the first offline failure or divergence.
pub fn flakiness_filter(
    draft: &BenchmarkEntry,
    mirror: &Path,
    runner: &Runner,
    adapter: &dyn BuildAdapter,
    config: &ReproducerConfig,
) -> Result<VerificationReport, StoreError> {
    config.validate()?;
    let mut report = VerificationReport {
        id: draft.id.clone(),
        k: config.k,
        runs: Vec::new(),
        verdict: Verdict::Stable,
        reason: None,
    };
    let image = match ensure_image(draft, Path::new(""), runner) {
        Ok(i) => i,
        Err(StoreError::Runner(e)) => {
            report.verdict = Verdict::OfflineFailure;
            report.reason = Some(format!("image import failed: {e}"));
            return Ok(report);
        }
        Err(e) => return Err(e),
    };

    let scratch = config.work_root.join(format!("verify-{}", draft.id));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
    }
    let result = (|| {
        let git = Git::clone_no_checkout(&mirror.display().to_string(), &scratch)?;
        let (pair, triple) = (draft.pair(), draft.triple());
        for attempt in 1..=config.k {
            for mode in [Mode::Buggy, Mode::Fixed] {
                if let Err(reason) = prepare_variant(&git, &pair, &triple, draft.variant(mode))? {
                    report.verdict = Verdict::OfflineFailure;
                    report.reason = Some(reason);
                    return Ok(());
                }
                let label = format!("verify:{}:{mode}:{attempt}", draft.id);
                let (status, test_run, note) = run_offline(draft, &scratch, &image, label, runner, adapter, config)?;
                let run = VerificationRun {
                    mode,
                    attempt,
                    network: NetworkMode::Isolated,
                    status,
                    test_run,
                    note,
                };
                let verdict = judge(&report.runs, &run);
                report.runs.push(run);
                if let Some((verdict, reason)) = verdict {
                    report.verdict = verdict;
                    report.reason = Some(reason);
                    return Ok(());
                }
            }
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&scratch);
    result.map(|()| report)
}

fn judge(previous: &[VerificationRun], run: &VerificationRun) -> Option<(Verdict, String)> {
    let tag = format!("{} run {}", run.mode, run.attempt);
    let Some(tr) = run.test_run.as_ref().filter(|_| run.status == ExecutionStatus::Completed) else {
        let why = run.note.clone().unwrap_or_else(|| format!("{:?}", run.status));
        return Some((Verdict::OfflineFailure, format!("{tag}: {why}")));
    };
    match previous.iter().find(|r| r.mode == run.mode) {
        Some(first) => (first.outcome() != Some(tr.outcome_multiset()))
            .then(|| (Verdict::Flaky, format!("{tag} differs from {} run {}", first.mode, first.attempt))),
        None => match run.mode {
            Mode::Buggy if !tr.has_failures() => Some((Verdict::Flaky, format!("{tag}: no failing test offline"))),
            Mode::Fixed if !tr.is_passing() => Some((Verdict::Flaky, format!("{tag}: not passing offline"))),
            _ => None,
        },
    }
}
