//! Repository discovery and probing.

mod search;

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use search::{
    Auth, HttpResponse, ReqwestTransport, SearchClient, SearchError, TokenBucket, Transport,
    GITHUB_API, PER_PAGE,
};

use crate::adapters::{BuildAdapter, TestRun};
use crate::git::Git;
use crate::runner::{ExecutionRequest, ExecutionStatus, Runner, DEFAULT_TIMEOUT_SECS};
use crate::workflow::{find_test_workflows, instrument_workflow, InstrumentOptions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCriteria {
    pub language: String,
    pub min_stars: u64,
    pub max_size_kb: u64,
    #[serde(default)]
    pub extra_query_terms: Vec<String>,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        Self {
            language: "Go".into(),
            min_stars: 50,
            max_size_kb: 204_800,
            extra_query_terms: Vec::new(),
        }
    }
}

impl SelectionCriteria {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_size_kb == 0 {
            return Err("max_size_kb must be positive".into());
        }
        if self.language.trim().is_empty() {
            return Err("language must be set".into());
        }
        Ok(())
    }

    /// Search query in the hosting platform's qualifier syntax.
    pub fn query(&self) -> String {
        let mut q = format!(
            "language:{} stars:>={} size:<={}",
            self.language, self.min_stars, self.max_size_kb
        );
        for t in &self.extra_query_terms {
            q.push(' ');
            q.push_str(t);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoProbeResult {
    pub test_workflow_count: usize,
    pub executed: bool,
    pub report_retrieved: bool,
    pub head_test_run: Option<TestRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_sha: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow_file: Option<String>,
    /// Why the repository was not executed or yielded no report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RepoProbeResult {
    fn not_executed(count: usize, note: impl Into<String>) -> Self {
        Self {
            test_workflow_count: count,
            executed: false,
            report_retrieved: false,
            head_test_run: None,
            head_sha: None,
            adapter: None,
            workflow_file: None,
            note: Some(note.into()),
        }
    }

    pub fn is_consistent(&self) -> bool {
        (!self.report_retrieved || self.executed) && (self.head_test_run.is_some() == self.report_retrieved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositoryRecord {
    pub full_name: String,
    pub clone_url: String,
    pub stars: u64,
    pub size_kb: u64,
    pub default_branch: String,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub probe: Option<RepoProbeResult>,
}

impl RepositoryRecord {
    pub fn is_valid(&self) -> bool {
        self.full_name.matches('/').count() == 1
    }

    /// Mining proceeds only for repositories whose head produced a report.
    pub fn retained(&self) -> bool {
        self.probe.as_ref().is_some_and(|p| p.report_retrieved)
    }
}

/// `stars ≥ min_stars`, `size_kb ≤ max_size_kb` and a matching language.
pub fn evaluate_criteria(record: &RepositoryRecord, criteria: &SelectionCriteria) -> bool {
    record.stars >= criteria.min_stars
        && record.size_kb <= criteria.max_size_kb
        && record
            .language
            .as_deref()
            .is_some_and(|l| l.eq_ignore_ascii_case(&criteria.language))
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub timeout: Duration,
    /// Run the first test workflow when a repository has several.
    pub allow_multiple_workflows: bool,
    pub instrument: InstrumentOptions,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            allow_multiple_workflows: false,
            instrument: InstrumentOptions::default(),
        }
    }
}

/// Shallow-clones the default branch into `workdir`, detects test workflows
/// with the first adapter that finds any, runs the workflow if there is
/// exactly one and reports whether a test report came back. `workdir` is
/// removed afterwards.
pub fn probe_repository(
    record: &RepositoryRecord,
    workdir: &Path,
    runner: &Runner,
    adapters: &[&dyn BuildAdapter],
    config: &ProbeConfig,
) -> RepoProbeResult {
    let result = probe_inner(record, workdir, runner, adapters, config);
    if workdir.exists() {
        if let Err(e) = fs::remove_dir_all(workdir) {
            tracing::warn!(dir = %workdir.display(), "probe cleanup failed: {e}");
        }
    }
    result
}

fn probe_inner(
    record: &RepositoryRecord,
    workdir: &Path,
    runner: &Runner,
    adapters: &[&dyn BuildAdapter],
    config: &ProbeConfig,
) -> RepoProbeResult {
    if workdir.exists() {
        let _ = fs::remove_dir_all(workdir);
    }
    let git = match Git::clone_shallow(&record.clone_url, Some(&record.default_branch), workdir) {
        Ok(g) => g,
        Err(e) => return RepoProbeResult::not_executed(0, format!("unprobeable: clone failed: {e}")),
    };
    let head = git.head().ok();

    let mut found = None;
    for adapter in adapters {
        match find_test_workflows(workdir, *adapter) {
            Ok(wfs) if !wfs.is_empty() => {
                found = Some((*adapter, wfs));
                break;
            }
            Ok(_) => {}
            Err(e) => return RepoProbeResult::not_executed(0, format!("workflow scan failed: {e}")),
        }
    }
    let Some((adapter, workflows)) = found else {
        return RepoProbeResult::not_executed(0, "no test workflow");
    };
    let count = workflows.len();
    if count != 1 && !config.allow_multiple_workflows {
        return RepoProbeResult::not_executed(count, format!("{count} test workflows"));
    }
    let wf = &workflows[0];
    let mut base = RepoProbeResult::not_executed(count, "");
    base.head_sha = head.clone();
    base.adapter = Some(adapter.id().to_string());
    base.workflow_file = Some(wf.file_name().to_string());

    let instrumented = match instrument_workflow(wf, adapter, &config.instrument) {
        Ok(i) => i,
        Err(e) => {
            base.note = Some(format!("instrumentation failed: {e}"));
            return base;
        }
    };
    let req = ExecutionRequest::new(
        format!("probe:{}", record.full_name),
        &record.full_name,
        workdir,
        head.unwrap_or_default(),
        instrumented,
    )
    .with_timeout(config.timeout);
    let mut res = match runner.execute_commit(&req) {
        Ok(r) => r,
        Err(e) => {
            base.note = Some(format!("execution error: {e}"));
            return base;
        }
    };
    if let Err(e) = runner.release(&mut res) {
        tracing::warn!("release after probe failed: {e}");
    }
    base.executed = true;
    match (res.status, res.test_run) {
        (ExecutionStatus::Completed, Some(tr)) => {
            base.report_retrieved = true;
            base.head_test_run = Some(tr);
            base.note = None;
        }
        (ExecutionStatus::Completed, None) => base.note = res.report_error,
        (ExecutionStatus::Timeout, _) => base.note = Some("timeout".into()),
        (ExecutionStatus::RunnerFailure, _) => base.note = res.failure_reason.or(Some("runner failure".into())),
    }
    base
}

#[cfg(test)]
mod tests;
