use std::path::{Path, PathBuf};
use std::time::Duration;

use super::{CommitPair, MinerError, PatchTriple, TreeVariant, VariantExecutor, VariantResult};
use crate::adapters::BuildAdapter;
use crate::git::Git;
use crate::runner::{ExecutionRequest, ExecutionStatus, Runner, DEFAULT_TIMEOUT_SECS};
use crate::workflow::{find_test_workflows, instrument_workflow, InstrumentOptions, InstrumentedWorkflow, WorkflowDescriptor};

#[derive(Debug, Clone)]
pub struct WorktreeExecutorConfig {
    pub timeout: Duration,
    /// Prepended to every execution label.
    pub label_prefix: String,
    /// File name of the test workflow to prefer when a tree has several.
    pub preferred_workflow: Option<String>,
    pub instrument: InstrumentOptions,
}

impl Default for WorktreeExecutorConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            label_prefix: "mine".into(),
            preferred_workflow: None,
            instrument: InstrumentOptions::default(),
        }
    }
}

/// Executes tree variants in a private worktree of the repository. Each
/// variant starts from a forced, fully cleaned checkout.
pub struct WorktreeExecutor<'a> {
    repo: String,
    source: Git,
    worktree: Git,
    runner: &'a Runner,
    adapter: &'a dyn BuildAdapter,
    config: WorktreeExecutorConfig,
}

impl<'a> WorktreeExecutor<'a> {
    pub fn new(
        repo: &str,
        source: Git,
        scratch: &Path,
        runner: &'a Runner,
        adapter: &'a dyn BuildAdapter,
        config: WorktreeExecutorConfig,
    ) -> Result<Self, MinerError> {
        let head = source.head()?;
        let worktree = source.worktree_add(scratch, &head)?;
        Ok(Self {
            repo: repo.to_string(),
            source,
            worktree,
            runner,
            adapter,
            config,
        })
    }

    pub fn worktree_dir(&self) -> &Path {
        self.worktree.dir()
    }

    fn label(&self, pair: &CommitPair, variant: TreeVariant) -> String {
        format!("{}:{}:{}:{variant}", self.config.label_prefix, self.repo, pair.current)
    }
}

impl Drop for WorktreeExecutor<'_> {
    fn drop(&mut self) {
        let dir: PathBuf = self.worktree.dir().to_path_buf();
        if let Err(e) = self.source.worktree_remove(&dir) {
            tracing::warn!(dir = %dir.display(), "worktree cleanup failed: {e}");
        }
    }
}

/// Checks out `variant` into `git`'s working tree. `Err` from the inner
/// result means the variant cannot be built (patch conflict).
pub fn prepare_variant(
    git: &Git,
    pair: &CommitPair,
    triple: &PatchTriple,
    variant: TreeVariant,
) -> Result<Result<(), String>, MinerError> {
    let base = match variant {
        TreeVariant::Current => &pair.current,
        TreeVariant::Previous | TreeVariant::PreviousWithTestChanges => &pair.previous,
    };
    git.checkout_clean(base)?;
    if variant == TreeVariant::PreviousWithTestChanges {
        for (name, patch) in [("test", &triple.test_patch), ("non-code", &triple.non_code_patch)] {
            if let Err(e) = git.apply(patch) {
                return Ok(Err(format!("{name} patch does not apply: {e}")));
            }
        }
    }
    Ok(Ok(()))
}

/// The one test workflow to run in `root`: the preferred file if present,
/// otherwise the only test workflow.
pub fn select_test_workflow(
    root: &Path,
    adapter: &dyn BuildAdapter,
    preferred: Option<&str>,
) -> Result<WorkflowDescriptor, String> {
    let found = find_test_workflows(root, adapter).map_err(|e| e.to_string())?;
    if let Some(p) = preferred {
        if let Some(wf) = found.iter().find(|w| w.file_name() == p) {
            return Ok(wf.clone());
        }
    }
    match found.len() {
        0 => Err("no test workflow".into()),
        1 => Ok(found.into_iter().next().unwrap()),
        n => Err(format!("{n} test workflows")),
    }
}

pub fn instrument_tree(
    root: &Path,
    adapter: &dyn BuildAdapter,
    preferred: Option<&str>,
    options: &InstrumentOptions,
) -> Result<InstrumentedWorkflow, String> {
    let wf = select_test_workflow(root, adapter, preferred)?;
    instrument_workflow(&wf, adapter, options).map_err(|e| format!("instrumentation failed: {e}"))
}

impl VariantExecutor for WorktreeExecutor<'_> {
    fn execute(
        &mut self,
        pair: &CommitPair,
        triple: &PatchTriple,
        variant: TreeVariant,
    ) -> Result<VariantResult, MinerError> {
        if let Err(reason) = prepare_variant(&self.worktree, pair, triple, variant)? {
            return Ok(VariantResult::Unrunnable(reason));
        }
        let workflow = match instrument_tree(
            self.worktree.dir(),
            self.adapter,
            self.config.preferred_workflow.as_deref(),
            &self.config.instrument,
        ) {
            Ok(w) => w,
            Err(reason) => return Ok(VariantResult::Unrunnable(reason)),
        };
        let commit = match variant {
            TreeVariant::Current => &pair.current,
            _ => &pair.previous,
        };
        let req = ExecutionRequest::new(
            self.label(pair, variant),
            &self.repo,
            self.worktree.dir(),
            commit,
            workflow,
        )
        .with_timeout(self.config.timeout);
        let mut result = self.runner.execute_commit(&req)?;
        self.runner.release(&mut result)?;
        Ok(match result.status {
            ExecutionStatus::Completed => match result.test_run {
                Some(tr) => VariantResult::Report(tr),
                None => VariantResult::NoReport(result.report_error.unwrap_or_default()),
            },
            ExecutionStatus::Timeout => VariantResult::Unrunnable("timeout".into()),
            ExecutionStatus::RunnerFailure => VariantResult::Unrunnable(format!(
                "runner failure: {}",
                result.failure_reason.unwrap_or_default()
            )),
        })
    }
}
