//! Containerised execution of instrumented workflows.
//!
//! [`Runner`] owns the request validation, report collection and container
//! accounting; the engine-specific work sits behind [`ContainerBackend`].

mod act;
mod sim;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use act::{ActBackend, ActConfig};
pub use sim::{Fault, SimulatedBackend, SimulatedRun};

use crate::adapters::{AdapterRegistry, ReportError, ReportSpec, TestRun, REPORTS_DIR};
use crate::workflow::InstrumentedWorkflow;

pub const DEFAULT_TIMEOUT_SECS: u64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    Online,
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub tag: String,
    pub digest: String,
}

/// Opaque handle to a post-run container.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContainerRef(pub String);

impl fmt::Display for ContainerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionRequest {
    /// Free-form run identifier, recorded in the audit log.
    pub label: String,
    /// `owner/name`; scopes per-repository backend state.
    pub repo: String,
    pub workdir: PathBuf,
    pub commit: String,
    pub workflow: InstrumentedWorkflow,
    pub timeout: Duration,
    pub network: NetworkMode,
    pub base_image: Option<ImageRef>,
    /// Permits an isolated run without a base image (failure probing only).
    pub allow_isolated_without_image: bool,
}

impl ExecutionRequest {
    pub fn new(
        label: impl Into<String>,
        repo: impl Into<String>,
        workdir: impl Into<PathBuf>,
        commit: impl Into<String>,
        workflow: InstrumentedWorkflow,
    ) -> Self {
        Self {
            label: label.into(),
            repo: repo.into(),
            workdir: workdir.into(),
            commit: commit.into(),
            workflow,
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            network: NetworkMode::Online,
            base_image: None,
            allow_isolated_without_image: false,
        }
    }

    pub fn offline(mut self, image: ImageRef) -> Self {
        self.network = NetworkMode::Isolated;
        self.base_image = Some(image);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.timeout.is_zero() {
            return Err(RunnerError::InvalidRequest("timeout must be positive".into()));
        }
        if self.network == NetworkMode::Isolated
            && self.base_image.is_none()
            && !self.allow_isolated_without_image
        {
            return Err(RunnerError::InvalidRequest(
                "isolated execution needs a base image".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Completed,
    RunnerFailure,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    /// Present only for completed runs with a parseable report.
    pub test_run: Option<TestRun>,
    /// Why a completed run has no `test_run`.
    pub report_error: Option<String>,
    /// Why the run did not complete.
    pub failure_reason: Option<String>,
    /// `None` once released or snapshotted.
    pub container: Option<ContainerRef>,
    pub log_path: PathBuf,
}

impl ExecutionResult {
    /// Completed, but the workflow left no usable report.
    pub fn crashed_without_report(&self) -> bool {
        self.status == ExecutionStatus::Completed && self.test_run.is_none()
    }
}

/// What a backend reports back from one workflow execution.
#[derive(Debug, Clone)]
pub struct BackendRun {
    pub status: ExecutionStatus,
    pub container: Option<ContainerRef>,
    pub log: String,
    pub failure_reason: Option<String>,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid execution request: {0}")]
    InvalidRequest(String),
    #[error("execution environment unavailable: {0}")]
    Environment(String),
    #[error("backend `{0}` cannot isolate the network")]
    IsolationUnsupported(String),
    #[error("image not available: {0}")]
    ImageMissing(String),
    #[error("snapshot failed: {0}")]
    Snapshot(String),
    #[error("container {0} was already released")]
    AlreadyReleased(String),
    #[error("container engine: {0}")]
    Engine(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Engine-specific half of execution.
///
/// A backend runs the shadow workflow with `req.workdir` bound as the
/// workspace, so reports land under `req.workdir/reports/<job>`.
pub trait ContainerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn runner_version(&self) -> Result<String, RunnerError>;
    fn supports_network_isolation(&self) -> bool;
    fn image_exists(&self, image: &ImageRef) -> bool;
    fn run_workflow(&self, req: &ExecutionRequest, shadow: &Path) -> Result<BackendRun, RunnerError>;
    fn commit(&self, container: &ContainerRef, tag: &str) -> Result<ImageRef, RunnerError>;
    fn export(&self, image: &ImageRef, archive: &Path) -> Result<(), RunnerError>;
    fn import(&self, archive: &Path) -> Result<ImageRef, RunnerError>;
    fn release(&self, container: &ContainerRef) -> Result<(), RunnerError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Created {
        container: String,
        label: String,
        network: NetworkMode,
        image: Option<String>,
    },
    Snapshotted {
        container: String,
        tag: String,
    },
    Released {
        container: String,
    },
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Default)]
struct Accounting {
    events: Vec<AuditEvent>,
    live: BTreeSet<String>,
}

/// Validated, accounted execution on top of a backend.
pub struct Runner {
    backend: Arc<dyn ContainerBackend>,
    adapters: AdapterRegistry,
    log_dir: PathBuf,
    slots: Semaphore,
    accounting: Mutex<Accounting>,
    seq: AtomicU64,
}

impl Runner {
    pub fn new(backend: Arc<dyn ContainerBackend>, log_dir: impl Into<PathBuf>, max_containers: usize) -> Self {
        Self {
            backend,
            adapters: AdapterRegistry::with_builtin(),
            log_dir: log_dir.into(),
            slots: Semaphore::new(max_containers),
            accounting: Mutex::new(Accounting::default()),
            seq: AtomicU64::new(0),
        }
    }

    pub fn backend(&self) -> &Arc<dyn ContainerBackend> {
        &self.backend
    }

    pub fn runner_version(&self) -> Result<String, RunnerError> {
        self.backend.runner_version()
    }

    pub fn audit(&self) -> Vec<AuditEvent> {
        self.accounting.lock().unwrap().events.clone()
    }

    /// Containers neither snapshotted nor released.
    pub fn live_containers(&self) -> Vec<String> {
        self.accounting.lock().unwrap().live.iter().cloned().collect()
    }

    /// Runs the workflow in a fresh container and parses its reports. The
    /// container of a completed run is kept for
    /// [`Runner::snapshot_environment`] and must be released by the caller
    /// otherwise; other containers are released here.
    pub fn execute_commit(&self, req: &ExecutionRequest) -> Result<ExecutionResult, RunnerError> {
        req.validate()?;
        if req.network == NetworkMode::Isolated {
            if !self.backend.supports_network_isolation() {
                return Err(RunnerError::IsolationUnsupported(self.backend.name().into()));
            }
            if let Some(image) = &req.base_image {
                if !self.backend.image_exists(image) {
                    return Err(RunnerError::ImageMissing(image.tag.clone()));
                }
            }
        }
        let adapter = self
            .adapters
            .get(&req.workflow.adapter)
            .map_err(|e| RunnerError::InvalidRequest(e.to_string()))?;

        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let run_dir = self.log_dir.join(format!("{seq:06}-{}", sanitize(&req.label)));
        fs::create_dir_all(&run_dir)?;
        let shadow = req.workflow.write_shadow(&run_dir.join("workflows"))?;
        let reports = req.workdir.join(REPORTS_DIR);
        if reports.exists() {
            fs::remove_dir_all(&reports)?;
        }

        let run = {
            let _slot = self.slots.acquire();
            self.backend.run_workflow(req, &shadow)?
        };
        let log_path = run_dir.join("run.log");
        fs::write(&log_path, &run.log)?;

        if let Some(c) = &run.container {
            let mut acc = self.accounting.lock().unwrap();
            acc.live.insert(c.0.clone());
            acc.events.push(AuditEvent::Created {
                container: c.0.clone(),
                label: req.label.clone(),
                network: req.network,
                image: req.base_image.as_ref().map(|i| i.tag.clone()),
            });
        }

        let mut result = ExecutionResult {
            status: run.status,
            test_run: None,
            report_error: None,
            failure_reason: run.failure_reason,
            container: run.container,
            log_path,
        };
        match run.status {
            ExecutionStatus::Completed => {
                match collect_reports(&req.workdir, &req.workflow.report_specs, |dir| {
                    adapter.parse_test_report(dir)
                }) {
                    Ok(tr) => result.test_run = Some(tr),
                    Err(e) => result.report_error = Some(e.to_string()),
                }
            }
            ExecutionStatus::Timeout | ExecutionStatus::RunnerFailure => self.release(&mut result)?,
        }
        Ok(result)
    }

    /// [`Runner::execute_commit`] restricted to isolated requests.
    pub fn execute_offline(&self, req: &ExecutionRequest) -> Result<ExecutionResult, RunnerError> {
        if req.network != NetworkMode::Isolated {
            return Err(RunnerError::InvalidRequest("offline execution requires isolation".into()));
        }
        if req.base_image.is_none() && !req.allow_isolated_without_image {
            return Err(RunnerError::InvalidRequest("offline execution needs a base image".into()));
        }
        self.execute_commit(req)
    }

    /// Commits the run's container to an image tagged `tag`. The container
    /// is consumed.
    pub fn snapshot_environment(&self, result: &mut ExecutionResult, tag: &str) -> Result<ImageRef, RunnerError> {
        if result.status != ExecutionStatus::Completed {
            return Err(RunnerError::Snapshot(format!(
                "run did not complete (status {:?})",
                result.status
            )));
        }
        let Some(container) = result.container.clone() else {
            return Err(RunnerError::Snapshot("run has no container".into()));
        };
        if !self.accounting.lock().unwrap().live.contains(&container.0) {
            return Err(RunnerError::AlreadyReleased(container.0));
        }
        let image = self.backend.commit(&container, tag)?;
        {
            let mut acc = self.accounting.lock().unwrap();
            acc.events.push(AuditEvent::Snapshotted {
                container: container.0.clone(),
                tag: tag.to_string(),
            });
        }
        self.release(result)?;
        Ok(image)
    }

    /// Releases the run's container, if it still has one.
    pub fn release(&self, result: &mut ExecutionResult) -> Result<(), RunnerError> {
        let Some(container) = result.container.take() else {
            return Ok(());
        };
        self.release_ref(&container)
    }

    pub fn release_ref(&self, container: &ContainerRef) -> Result<(), RunnerError> {
        if !self.accounting.lock().unwrap().live.contains(&container.0) {
            return Err(RunnerError::AlreadyReleased(container.0.clone()));
        }
        self.backend.release(container)?;
        let mut acc = self.accounting.lock().unwrap();
        acc.live.remove(&container.0);
        acc.events.push(AuditEvent::Released {
            container: container.0.clone(),
        });
        Ok(())
    }

    pub fn export_image(&self, image: &ImageRef, archive: &Path) -> Result<(), RunnerError> {
        if let Some(parent) = archive.parent() {
            fs::create_dir_all(parent)?;
        }
        self.backend.export(image, archive)
    }

    pub fn import_image(&self, archive: &Path) -> Result<ImageRef, RunnerError> {
        if !archive.is_file() {
            return Err(RunnerError::ImageMissing(archive.display().to_string()));
        }
        self.backend.import(archive)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .take(80)
        .collect()
}

/// Copies glob-selected files into each spec's report directory, then parses
/// every directory that has reports. Fails only if none does.
fn collect_reports(
    workdir: &Path,
    specs: &[ReportSpec],
    parse: impl Fn(&Path) -> Result<TestRun, ReportError>,
) -> Result<TestRun, ReportError> {
    let mut runs = Vec::new();
    let mut first_err = None;
    for spec in specs {
        let dir = workdir.join(&spec.report_dir);
        if !spec.collect_globs.is_empty() {
            if let Err(e) = copy_globbed(workdir, &spec.collect_globs, &dir) {
                first_err.get_or_insert(ReportError::Io { path: dir.clone(), source: e });
                continue;
            }
        }
        match parse(&dir) {
            Ok(r) => runs.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if runs.is_empty() {
        return Err(first_err.unwrap_or_else(|| ReportError::ReportMissing(workdir.join(REPORTS_DIR))));
    }
    Ok(TestRun::merge(runs))
}

fn copy_globbed(workdir: &Path, globs: &[String], dest: &Path) -> std::io::Result<()> {
    let mut builder = globset::GlobSetBuilder::new();
    for g in globs {
        let glob = globset::Glob::new(g).map_err(|e| std::io::Error::other(e.to_string()))?;
        builder.add(glob);
    }
    let set = builder.build().map_err(|e| std::io::Error::other(e.to_string()))?;
    let walker = walkdir::WalkDir::new(workdir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git" && e.path() != workdir.join(REPORTS_DIR));
    for entry in walker {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(workdir).unwrap_or(entry.path());
        if set.is_match(rel) {
            fs::create_dir_all(dest)?;
            let flat = rel.to_string_lossy().replace('/', "__");
            fs::copy(entry.path(), dest.join(flat))?;
        }
    }
    Ok(())
}
