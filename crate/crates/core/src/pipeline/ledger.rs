use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::miner::Pattern;

/// Drop reasons always shown in reports, even at zero.
pub const CORE_DROP_REASONS: [&str; 3] = ["flaky", "offline_failure", "runner_failure"];

/// Funnel counts. Conservation: `candidates = final + drops + pending`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLedger {
    pub repos_found: u64,
    pub repos_probed: u64,
    pub repos_retained: u64,
    pub pairs_examined: u64,
    pub candidates_pass_pass_with_tests: u64,
    pub candidates_fail_pass_source_only: u64,
    pub dropped: BTreeMap<String, u64>,
    /// Candidates not yet through verification.
    pub pending: u64,
    #[serde(rename = "final")]
    pub final_entries: u64,
}

impl StageLedger {
    pub fn candidates(&self) -> u64 {
        self.candidates_pass_pass_with_tests + self.candidates_fail_pass_source_only
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.candidates() == self.final_entries + self.dropped_total() + self.pending
            && self.final_entries <= self.candidates()
            && self.candidates() <= self.pairs_examined
    }

    pub fn add_candidate(&mut self, p: Pattern) {
        match p {
            Pattern::PassPassWithTests => self.candidates_pass_pass_with_tests += 1,
            Pattern::FailPassSourceOnly => self.candidates_fail_pass_source_only += 1,
        }
    }

    pub fn drop_reason(&mut self, reason: &str) {
        *self.dropped.entry(drop_key(reason)).or_default() += 1;
    }
}

/// Ledger key of a drop reason: the part before any `:` detail, with
/// bundle-time runner failures folded into `runner_failure`.
pub fn drop_key(reason: &str) -> String {
    let key = reason.split(':').next().unwrap_or(reason).trim();
    match key {
        "bundle_runner_failure" | "bundle_timeout" => "runner_failure".into(),
        k => k.into(),
    }
}

/// Concurrent counters for the work done by one stage invocation.
#[derive(Debug, Default)]
pub struct AtomicLedger {
    repos_found: AtomicU64,
    repos_probed: AtomicU64,
    repos_retained: AtomicU64,
    pairs_examined: AtomicU64,
    p1: AtomicU64,
    p2: AtomicU64,
    final_entries: AtomicU64,
    dropped: Mutex<BTreeMap<String, u64>>,
}

impl AtomicLedger {
    pub fn repo_found(&self) {
        self.repos_found.fetch_add(1, Ordering::Relaxed);
    }
    pub fn repo_probed(&self, retained: bool) {
        self.repos_probed.fetch_add(1, Ordering::Relaxed);
        if retained {
            self.repos_retained.fetch_add(1, Ordering::Relaxed);
        }
    }
    pub fn pairs(&self, n: u64) {
        self.pairs_examined.fetch_add(n, Ordering::Relaxed);
    }
    pub fn candidate(&self, p: Pattern) {
        match p {
            Pattern::PassPassWithTests => &self.p1,
            Pattern::FailPassSourceOnly => &self.p2,
        }
        .fetch_add(1, Ordering::Relaxed);
    }
    pub fn finalized(&self) {
        self.final_entries.fetch_add(1, Ordering::Relaxed);
    }
    pub fn dropped(&self, reason: &str) {
        let mut d = self.dropped.lock().unwrap_or_else(|p| p.into_inner());
        *d.entry(drop_key(reason)).or_default() += 1;
    }

    pub fn snapshot(&self) -> StageLedger {
        StageLedger {
            repos_found: self.repos_found.load(Ordering::Relaxed),
            repos_probed: self.repos_probed.load(Ordering::Relaxed),
            repos_retained: self.repos_retained.load(Ordering::Relaxed),
            pairs_examined: self.pairs_examined.load(Ordering::Relaxed),
            candidates_pass_pass_with_tests: self.p1.load(Ordering::Relaxed),
            candidates_fail_pass_source_only: self.p2.load(Ordering::Relaxed),
            dropped: self.dropped.lock().unwrap_or_else(|p| p.into_inner()).clone(),
            pending: 0,
            final_entries: self.final_entries.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?} (expected text or json)")),
        }
    }
}

/// Renders the funnel. Output depends only on the ledger.
pub fn emit_report(ledger: &StageLedger, format: ReportFormat) -> String {
    let mut dropped: BTreeMap<String, u64> = CORE_DROP_REASONS.iter().map(|r| (r.to_string(), 0)).collect();
    for (k, v) in &ledger.dropped {
        *dropped.entry(k.clone()).or_default() += v;
    }
    match format {
        ReportFormat::Json => {
            let mut l = ledger.clone();
            l.dropped = dropped;
            let mut v = serde_json::to_value(&l).expect("ledger serializes");
            v["candidates"] = ledger.candidates().into();
            serde_json::to_string_pretty(&v).expect("ledger serializes") + "\n"
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let mut line = |k: &str, v: u64| writeln!(s, "{k:<32}{v}").expect("write to string");
            line("repos_found", ledger.repos_found);
            line("repos_probed", ledger.repos_probed);
            line("repos_retained", ledger.repos_retained);
            line("pairs_examined", ledger.pairs_examined);
            line("candidates", ledger.candidates());
            line("  pass_pass_with_tests", ledger.candidates_pass_pass_with_tests);
            line("  fail_pass_source_only", ledger.candidates_fail_pass_source_only);
            line("dropped", dropped.values().sum());
            for (k, v) in &dropped {
                line(&format!("  {k}"), *v);
            }
            line("pending", ledger.pending);
            line("final", ledger.final_entries);
            s
        }
    }
}
