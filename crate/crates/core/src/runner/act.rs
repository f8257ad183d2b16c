//! Backend driving the `act` runner and the docker CLI.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    BackendRun, ContainerBackend, ContainerRef, ExecutionRequest, ExecutionStatus, ImageRef,
    NetworkMode, RunnerError,
};
use crate::adapters::report::report_files;
use crate::adapters::REPORTS_DIR;
use crate::workflow::{DEFAULT_LOCAL_LABEL, LOCAL_TRIGGER};

const RUN_LABEL: &str = "io.bugharvest.run";

/// Log fragments that mean the engine or the network failed, as opposed to
/// the tests.
const INFRA_MARKERS: &[&str] = &[
    "Cannot connect to the Docker daemon",
    "Error response from daemon",
    "failed to create container",
    "failed to start container",
    "Temporary failure in name resolution",
    "Could not resolve host",
    "no such host",
    "network is unreachable",
    "dial tcp",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ActConfig {
    pub act_bin: PathBuf,
    pub docker_bin: PathBuf,
    /// Image mapped to the local runner label for online runs. Should be a
    /// digest reference (`name@sha256:...`).
    pub platform_image: String,
    pub extra_args: Vec<String>,
}

impl Default for ActConfig {
    fn default() -> Self {
        Self {
            act_bin: "act".into(),
            docker_bin: "docker".into(),
            platform_image: "catthehacker/ubuntu:act-22.04".into(),
            extra_args: Vec::new(),
        }
    }
}

pub struct ActBackend {
    config: ActConfig,
    seq: AtomicU64,
}

fn engine_err(what: &str, out: &std::process::Output) -> RunnerError {
    RunnerError::Engine(format!(
        "{what}: {}",
        String::from_utf8_lossy(&out.stderr).trim()
    ))
}

impl ActBackend {
    /// Fails if either tool is missing.
    pub fn new(config: ActConfig) -> Result<Self, RunnerError> {
        let backend = Self::unchecked(config);
        backend.runner_version()?;
        backend.docker(&["version", "--format", "{{.Server.Version}}"])?;
        if !backend.config.platform_image.contains("@sha256:") {
            tracing::warn!(image = %backend.config.platform_image, "runner image is not pinned by digest");
        }
        Ok(backend)
    }

    fn unchecked(config: ActConfig) -> Self {
        Self {
            config,
            seq: AtomicU64::new(0),
        }
    }

    fn docker(&self, args: &[&str]) -> Result<String, RunnerError> {
        let out = Command::new(&self.config.docker_bin)
            .args(args)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| RunnerError::Environment(format!("{}: {e}", self.config.docker_bin.display())))?;
        if !out.status.success() {
            return Err(engine_err(&format!("docker {}", args.join(" ")), &out));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    /// The `act` argument vector for one run.
    pub fn act_args(&self, req: &ExecutionRequest, shadow: &Path, run_id: &str) -> Vec<String> {
        let image = match &req.base_image {
            Some(img) => img.tag.clone(),
            None => self.config.platform_image.clone(),
        };
        let mut args = vec![
            LOCAL_TRIGGER.to_string(),
            "-W".into(),
            shadow.display().to_string(),
            "-C".into(),
            req.workdir.display().to_string(),
            "-P".into(),
            format!("{DEFAULT_LOCAL_LABEL}={image}"),
            "--bind".into(),
            "--reuse".into(),
            "--container-options".into(),
            format!("--label {RUN_LABEL}={run_id}"),
        ];
        if req.base_image.is_some() {
            args.push("--pull=false".into());
        }
        if req.network == NetworkMode::Isolated {
            args.extend(["--network".into(), "none".into(), "--action-offline-mode".into()]);
        }
        args.extend(self.config.extra_args.iter().cloned());
        args
    }

    fn containers_of(&self, run_id: &str) -> Result<Vec<String>, RunnerError> {
        let filter = format!("label={RUN_LABEL}={run_id}");
        let out = self.docker(&["ps", "-aq", "--filter", &filter])?;
        Ok(out.lines().map(str::to_string).filter(|s| !s.is_empty()).collect())
    }

    fn inspect_digest(&self, tag: &str) -> Result<String, RunnerError> {
        self.docker(&["image", "inspect", "--format", "{{.Id}}", tag])
    }
}

impl ContainerBackend for ActBackend {
    fn name(&self) -> &str {
        "act"
    }

    fn runner_version(&self) -> Result<String, RunnerError> {
        let out = Command::new(&self.config.act_bin)
            .arg("--version")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| RunnerError::Environment(format!("{}: {e}", self.config.act_bin.display())))?;
        if !out.status.success() {
            return Err(engine_err("act --version", &out));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }

    fn supports_network_isolation(&self) -> bool {
        true
    }

    fn image_exists(&self, image: &ImageRef) -> bool {
        self.inspect_digest(&image.tag).is_ok_and(|d| d == image.digest)
    }

    fn run_workflow(&self, req: &ExecutionRequest, shadow: &Path) -> Result<BackendRun, RunnerError> {
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        let run_id = format!("{}-{n}", std::process::id());
        let log_file = shadow
            .parent()
            .and_then(Path::parent)
            .unwrap_or(Path::new("."))
            .join("act.log");
        let log = File::create(&log_file)?;
        let mut child = Command::new(&self.config.act_bin)
            .args(self.act_args(req, shadow, &run_id))
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()
            .map_err(|e| RunnerError::Environment(format!("{}: {e}", self.config.act_bin.display())))?;

        let deadline = Instant::now() + req.timeout;
        let timed_out = loop {
            if child.try_wait()?.is_some() {
                break false;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                break true;
            }
            std::thread::sleep(Duration::from_millis(250));
        };
        let log_text = fs::read_to_string(&log_file).unwrap_or_default();
        let containers = self.containers_of(&run_id)?;
        let container = (!containers.is_empty()).then(|| ContainerRef(run_id.clone()));

        if timed_out {
            return Ok(BackendRun {
                status: ExecutionStatus::Timeout,
                container,
                log: log_text,
                failure_reason: Some(format!("no result within {}s", req.timeout.as_secs())),
            });
        }
        let has_report = !report_files(&req.workdir.join(REPORTS_DIR))
            .unwrap_or_default()
            .is_empty();
        let marker = INFRA_MARKERS.iter().find(|m| log_text.contains(*m));
        let (status, reason) = match (has_report, marker, &container) {
            (false, Some(m), _) => (ExecutionStatus::RunnerFailure, Some(format!("runner log: {m}"))),
            (_, _, None) => (ExecutionStatus::RunnerFailure, Some("no container was created".into())),
            _ => (ExecutionStatus::Completed, None),
        };
        Ok(BackendRun {
            status,
            container,
            log: log_text,
            failure_reason: reason,
        })
    }

    fn commit(&self, container: &ContainerRef, tag: &str) -> Result<ImageRef, RunnerError> {
        // the newest container of the run belongs to the last kept job
        let ids = self.containers_of(&container.0)?;
        let id = ids
            .first()
            .ok_or_else(|| RunnerError::AlreadyReleased(container.0.clone()))?;
        self.docker(&["commit", id, tag])
            .map_err(|e| RunnerError::Snapshot(e.to_string()))?;
        Ok(ImageRef {
            tag: tag.to_string(),
            digest: self.inspect_digest(tag)?,
        })
    }

    fn export(&self, image: &ImageRef, archive: &Path) -> Result<(), RunnerError> {
        let path = archive.display().to_string();
        self.docker(&["save", "-o", &path, &image.tag])?;
        Ok(())
    }

    fn import(&self, archive: &Path) -> Result<ImageRef, RunnerError> {
        let path = archive.display().to_string();
        let out = self.docker(&["load", "-i", &path])?;
        let tag = out
            .lines()
            .find_map(|l| l.strip_prefix("Loaded image: ").or_else(|| l.strip_prefix("Loaded image ID: ")))
            .map(str::trim)
            .ok_or_else(|| RunnerError::Engine(format!("unexpected docker load output: {out}")))?
            .to_string();
        Ok(ImageRef {
            digest: self.inspect_digest(&tag)?,
            tag,
        })
    }

    fn release(&self, container: &ContainerRef) -> Result<(), RunnerError> {
        let ids = self.containers_of(&container.0)?;
        if ids.is_empty() {
            return Err(RunnerError::AlreadyReleased(container.0.clone()));
        }
        let mut args = vec!["rm", "-f"];
        args.extend(ids.iter().map(String::as_str));
        self.docker(&args)?;
        Ok(())
    }
}
