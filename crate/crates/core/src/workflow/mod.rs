//! CI workflow documents: parsing, test-workflow detection, and rewriting
//! into a form that runs locally and leaves test reports behind.
//!
//! Everything in here is a pure transformation over in-memory documents
//! (apart from [`parse_workflows`], which reads a checkout).

mod closure;
mod instrument;
mod matrix;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::adapters::BuildAdapter;

pub use closure::needs_closure;
pub use instrument::{instrument_workflow, InstrumentOptions, InstrumentedWorkflow};
pub use matrix::first_configuration;

/// Location of workflow files inside a repository.
pub const WORKFLOWS_DIR: &str = ".github/workflows";

/// Runner label every kept job is pinned to.
pub const DEFAULT_LOCAL_LABEL: &str = "ubuntu-latest";

/// Trigger the rewritten workflow answers to.
pub const LOCAL_TRIGGER: &str = "workflow_dispatch";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid YAML: {message}")]
    Yaml { path: String, message: String },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("{0} contains no test job")]
    NotATestWorkflow(String),
    #[error("job `{job}` references undefined matrix axis `{axis}`")]
    UndefinedMatrixAxis { job: String, axis: String },
    #[error("job `{job}`: matrix cannot be collapsed: {reason}")]
    UnsupportedMatrix { job: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    ShellCommand,
    ReusableAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub name: Option<String>,
    pub kind: StepKind,
    /// The `run:` script or the `uses:` reference.
    pub payload: String,
    /// Set by [`detect_test_workflows`]; only ever true for shell commands.
    pub is_test_step: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub runs_on: String,
    pub needs: Vec<String>,
    /// `strategy.matrix`, as written.
    pub matrix: Option<Value>,
    pub steps: Vec<StepSpec>,
}

impl JobSpec {
    pub fn is_test_job(&self) -> bool {
        self.steps.iter().any(|s| s.is_test_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowDescriptor {
    /// Repository-relative path, e.g. `.github/workflows/ci.yml`.
    pub path: String,
    pub name: Option<String>,
    pub triggers: Vec<String>,
    pub jobs: IndexMap<String, JobSpec>,
    pub(crate) document: Mapping,
}

impl WorkflowDescriptor {
    pub fn file_name(&self) -> &str {
        self.path.rsplit('/').next().unwrap_or(&self.path)
    }

    pub fn test_jobs(&self) -> BTreeSet<String> {
        self.jobs
            .iter()
            .filter(|(_, j)| j.is_test_job())
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn is_test_workflow(&self) -> bool {
        self.jobs.values().any(JobSpec::is_test_job)
    }

    /// Marks shell steps the adapter recognises as test steps.
    pub fn mark_test_steps(&mut self, adapter: &dyn BuildAdapter) {
        for job in self.jobs.values_mut() {
            for step in &mut job.steps {
                step.is_test_step =
                    step.kind == StepKind::ShellCommand && adapter.is_test_command(&step.payload);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowWarning {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedWorkflows {
    pub workflows: Vec<WorkflowDescriptor>,
    pub warnings: Vec<WorkflowWarning>,
}

/// Parses every `*.yml`/`*.yaml` under `.github/workflows`, in file-name
/// order. A missing directory yields nothing; a file that fails to parse or
/// validate becomes a warning instead of aborting the scan.
pub fn parse_workflows(repo_root: &Path) -> Result<ParsedWorkflows, WorkflowError> {
    let dir = repo_root.join(WORKFLOWS_DIR);
    if !repo_root.is_dir() {
        return Err(WorkflowError::Io {
            path: repo_root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ParsedWorkflows::default()),
        Err(source) => return Err(WorkflowError::Io { path: dir, source }),
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("yml") | Some("yaml")
                )
        })
        .collect();
    files.sort();

    let mut out = ParsedWorkflows::default();
    for file in files {
        let rel = format!(
            "{WORKFLOWS_DIR}/{}",
            file.file_name().and_then(|f| f.to_str()).unwrap_or_default()
        );
        let text = fs::read_to_string(&file).map_err(|source| WorkflowError::Io {
            path: file.clone(),
            source,
        })?;
        match parse_workflow(&rel, &text) {
            Ok(wf) => out.workflows.push(wf),
            Err(e) => out.warnings.push(WorkflowWarning {
                path: rel,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

fn invalid(path: &str, reason: impl Into<String>) -> WorkflowError {
    WorkflowError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn display_value(v: &Value) -> String {
    scalar_string(v).unwrap_or_else(|| {
        serde_yaml::to_string(v)
            .unwrap_or_default()
            .trim()
            .replace('\n', " ")
    })
}

/// Parses and validates one workflow document.
pub fn parse_workflow(path: &str, text: &str) -> Result<WorkflowDescriptor, WorkflowError> {
    let value: Value = serde_yaml::from_str(text).map_err(|e| WorkflowError::Yaml {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    let Value::Mapping(document) = value else {
        return Err(invalid(path, "document root is not a mapping"));
    };

    let name = document.get("name").and_then(scalar_string);
    let triggers = match document.get("on") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Sequence(seq)) => seq.iter().filter_map(scalar_string).collect(),
        Some(Value::Mapping(m)) => m.keys().filter_map(scalar_string).collect(),
        Some(_) => return Err(invalid(path, "unsupported `on` value")),
    };

    let Some(Value::Mapping(jobs_map)) = document.get("jobs") else {
        return Err(invalid(path, "missing `jobs` mapping"));
    };
    if jobs_map.is_empty() {
        return Err(invalid(path, "workflow declares no jobs"));
    }

    let mut jobs = IndexMap::new();
    for (key, job) in jobs_map {
        let id = scalar_string(key).ok_or_else(|| invalid(path, "non-scalar job id"))?;
        let Value::Mapping(job) = job else {
            return Err(invalid(path, format!("job `{id}` is not a mapping")));
        };
        let spec = parse_job(path, &id, job)?;
        if jobs.insert(id.clone(), spec).is_some() {
            return Err(invalid(path, format!("duplicate job id `{id}`")));
        }
    }
    for (id, job) in &jobs {
        for need in &job.needs {
            if !jobs.contains_key(need) {
                return Err(invalid(
                    path,
                    format!("job `{id}` needs unknown job `{need}`"),
                ));
            }
        }
    }

    Ok(WorkflowDescriptor {
        path: path.to_string(),
        name,
        triggers,
        jobs,
        document,
    })
}

fn parse_job(path: &str, id: &str, job: &Mapping) -> Result<JobSpec, WorkflowError> {
    let runs_on = job.get("runs-on").map(display_value).unwrap_or_default();
    let needs = match job.get("needs") {
        None => Vec::new(),
        Some(Value::Sequence(seq)) => seq
            .iter()
            .map(|v| scalar_string(v).ok_or_else(|| invalid(path, format!("job `{id}`: bad needs entry"))))
            .collect::<Result<_, _>>()?,
        Some(v) => vec![scalar_string(v).ok_or_else(|| invalid(path, format!("job `{id}`: bad needs")))?],
    };

    let matrix = job
        .get("strategy")
        .and_then(|s| s.as_mapping())
        .and_then(|s| s.get("matrix"))
        .cloned();
    if let Some(Value::Mapping(m)) = &matrix {
        for (axis, values) in m {
            let axis_name = scalar_string(axis).unwrap_or_default();
            if axis_name == "include" || axis_name == "exclude" {
                continue;
            }
            if let Value::Sequence(seq) = values {
                if seq.is_empty() {
                    return Err(invalid(
                        path,
                        format!("job `{id}`: matrix axis `{axis_name}` is empty"),
                    ));
                }
            }
        }
    }

    let mut steps = Vec::new();
    if let Some(raw_steps) = job.get("steps") {
        let Value::Sequence(raw_steps) = raw_steps else {
            return Err(invalid(path, format!("job `{id}`: steps is not a list")));
        };
        for (i, step) in raw_steps.iter().enumerate() {
            let Value::Mapping(step) = step else {
                return Err(invalid(path, format!("job `{id}`: step {i} is not a mapping")));
            };
            let name = step.get("name").and_then(scalar_string);
            let (kind, payload) = match (step.get("run"), step.get("uses")) {
                (Some(run), _) => (
                    StepKind::ShellCommand,
                    scalar_string(run).unwrap_or_default(),
                ),
                (None, Some(uses)) => (
                    StepKind::ReusableAction,
                    scalar_string(uses).unwrap_or_default(),
                ),
                (None, None) => {
                    return Err(invalid(
                        path,
                        format!("job `{id}`: step {i} has neither `run` nor `uses`"),
                    ))
                }
            };
            steps.push(StepSpec {
                name,
                kind,
                payload,
                is_test_step: false,
            });
        }
    }

    Ok(JobSpec {
        runs_on,
        needs,
        matrix,
        steps,
    })
}

/// The workflows containing at least one shell step that the adapter
/// recognises as a test command, with those steps marked. Steps that call
/// reusable actions are never inspected.
pub fn detect_test_workflows(
    workflows: &[WorkflowDescriptor],
    adapter: &dyn BuildAdapter,
) -> Vec<WorkflowDescriptor> {
    workflows
        .iter()
        .cloned()
        .filter_map(|mut wf| {
            wf.mark_test_steps(adapter);
            wf.is_test_workflow().then_some(wf)
        })
        .collect()
}

/// Parses the workflows of a checkout and keeps the test workflows.
pub fn find_test_workflows(
    repo_root: &Path,
    adapter: &dyn BuildAdapter,
) -> Result<Vec<WorkflowDescriptor>, WorkflowError> {
    let parsed = parse_workflows(repo_root)?;
    for w in &parsed.warnings {
        tracing::debug!(path = %w.path, "skipping workflow: {}", w.message);
    }
    Ok(detect_test_workflows(&parsed.workflows, adapter))
}
