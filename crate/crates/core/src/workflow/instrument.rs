use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde_yaml::{Mapping, Value};

use super::matrix::collapse;
use super::{
    needs_closure, scalar_string, WorkflowDescriptor, WorkflowError, DEFAULT_LOCAL_LABEL,
    LOCAL_TRIGGER,
};
use crate::adapters::{BuildAdapter, ReportSpec};

static MATRIX_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bmatrix\.([A-Za-z_][A-Za-z0-9_-]*)").unwrap());

#[derive(Debug, Clone)]
pub struct InstrumentOptions {
    /// Label written into every kept job's `runs-on`.
    pub local_label: String,
}

impl Default for InstrumentOptions {
    fn default() -> Self {
        Self {
            local_label: DEFAULT_LOCAL_LABEL.to_string(),
        }
    }
}

/// A test workflow rewritten for local execution.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentedWorkflow {
    pub original: WorkflowDescriptor,
    pub rewritten_document: String,
    pub kept_jobs: BTreeSet<String>,
    pub test_jobs: BTreeSet<String>,
    /// One entry per test job, in job order.
    pub report_specs: Vec<ReportSpec>,
    pub original_triggers: Vec<String>,
    pub adapter: String,
    pub warnings: Vec<String>,
}

impl InstrumentedWorkflow {
    /// Writes the rewritten document into `dir` under the original file
    /// name and returns its path.
    pub fn write_shadow(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(self.original.file_name());
        fs::write(&path, &self.rewritten_document)?;
        Ok(path)
    }
}

/// Rewrites a test workflow so that it can run locally:
/// the trigger becomes on-demand, only test jobs and what they transitively
/// `need` are kept, every kept job runs on the local label, matrices collapse
/// to their first configuration, and test commands are instrumented to write
/// reports. Re-instrumenting the output changes nothing.
pub fn instrument_workflow(
    wf: &WorkflowDescriptor,
    adapter: &dyn BuildAdapter,
    options: &InstrumentOptions,
) -> Result<InstrumentedWorkflow, WorkflowError> {
    let mut original = wf.clone();
    original.mark_test_steps(adapter);
    let test_jobs = original.test_jobs();
    if test_jobs.is_empty() {
        return Err(WorkflowError::NotATestWorkflow(wf.path.clone()));
    }
    let kept_jobs = needs_closure(&original.jobs, &test_jobs)?;

    let mut doc = original.document.clone();
    doc.insert("on".into(), Value::String(LOCAL_TRIGGER.into()));

    let jobs = doc
        .get("jobs")
        .and_then(Value::as_mapping)
        .cloned()
        .unwrap_or_default();
    let mut new_jobs = Mapping::new();
    let mut report_specs = Vec::new();
    let mut warnings = Vec::new();
    for (key, job) in jobs {
        let Some(id) = scalar_string(&key) else { continue };
        if !kept_jobs.contains(&id) {
            continue;
        }
        let Value::Mapping(mut job) = job else { continue };
        rewrite_job(&id, &mut job, adapter, options, &mut report_specs, &mut warnings)?;
        new_jobs.insert(key, Value::Mapping(job));
    }
    doc.insert("jobs".into(), Value::Mapping(new_jobs));

    let rewritten_document =
        serde_yaml::to_string(&Value::Mapping(doc)).map_err(|e| WorkflowError::Yaml {
            path: wf.path.clone(),
            message: e.to_string(),
        })?;

    Ok(InstrumentedWorkflow {
        original_triggers: original.triggers.clone(),
        adapter: adapter.id().to_string(),
        original,
        rewritten_document,
        kept_jobs,
        test_jobs,
        report_specs,
        warnings,
    })
}

fn rewrite_job(
    id: &str,
    job: &mut Mapping,
    adapter: &dyn BuildAdapter,
    options: &InstrumentOptions,
    report_specs: &mut Vec<ReportSpec>,
    warnings: &mut Vec<String>,
) -> Result<(), WorkflowError> {
    let matrix = job
        .get("strategy")
        .and_then(Value::as_mapping)
        .and_then(|s| s.get("matrix"))
        .cloned();
    let collapsed = matrix.as_ref().map(|m| collapse(id, m)).transpose()?;
    let defined: BTreeSet<String> = collapsed
        .iter()
        .flat_map(|m| m.keys().filter_map(scalar_string))
        .collect();
    check_matrix_refs(id, &Value::Mapping(job.clone()), &defined)?;

    // reusable-workflow jobs (`uses:` at job level) cannot carry runs-on
    if !job.contains_key("uses") {
        job.insert("runs-on".into(), Value::String(options.local_label.clone()));
    }
    if let Some(collapsed) = collapsed {
        if let Some(Value::Mapping(strategy)) = job.get_mut("strategy") {
            strategy.insert("matrix".into(), Value::Mapping(collapsed));
        }
    }

    let mut spec: Option<ReportSpec> = None;
    let mut saw_test_step = false;
    if let Some(Value::Sequence(steps)) = job.get_mut("steps") {
        for step in steps.iter_mut() {
            let Value::Mapping(step) = step else { continue };
            let Some(run) = step.get("run").and_then(scalar_string) else {
                continue;
            };
            if !adapter.is_test_command(&run) {
                continue;
            }
            saw_test_step = true;
            let rewrite = adapter.rewrite_test_command(&run, id);
            warnings.extend(rewrite.warnings.iter().map(|w| format!("job `{id}`: {w}")));
            if rewrite.command != run {
                step.insert("run".into(), Value::String(rewrite.command));
            }
            if spec.is_none() {
                spec = rewrite.report;
            }
        }
    }
    match spec {
        Some(s) => report_specs.push(s),
        None if saw_test_step => warnings.push(format!(
            "job `{id}`: test step could not be instrumented, no report expected"
        )),
        None => {}
    }
    Ok(())
}

fn check_matrix_refs(job: &str, v: &Value, defined: &BTreeSet<String>) -> Result<(), WorkflowError> {
    match v {
        Value::String(s) => {
            for cap in MATRIX_REF.captures_iter(s) {
                let axis = &cap[1];
                if !defined.contains(axis) {
                    return Err(WorkflowError::UndefinedMatrixAxis {
                        job: job.to_string(),
                        axis: axis.to_string(),
                    });
                }
            }
            Ok(())
        }
        Value::Sequence(seq) => seq.iter().try_for_each(|x| check_matrix_refs(job, x, defined)),
        Value::Mapping(m) => m
            .iter()
            .filter(|(k, _)| k.as_str() != Some("strategy"))
            .try_for_each(|(_, x)| check_matrix_refs(job, x, defined)),
        Value::Tagged(t) => check_matrix_refs(job, &t.value, defined),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::GoAdapter;
    use crate::workflow::parse_workflow;

    fn instrument(doc: &str) -> Result<InstrumentedWorkflow, WorkflowError> {
        let wf = parse_workflow(".github/workflows/ci.yml", doc).unwrap();
        instrument_workflow(&wf, &GoAdapter, &InstrumentOptions::default())
    }

    #[test]
    fn drops_jobs_outside_the_closure() {
        let out = instrument(
            "on: push\njobs:\n  test:\n    runs-on: macos-13\n    steps:\n      - run: go test ./...\n  deploy:\n    runs-on: x\n    needs: test\n    steps:\n      - run: ./deploy.sh\n",
        )
        .unwrap();
        assert_eq!(out.kept_jobs.iter().collect::<Vec<_>>(), vec!["test"]);
        assert!(!out.rewritten_document.contains("deploy"));
        assert!(out.rewritten_document.contains("runs-on: ubuntu-latest"));
        assert_eq!(out.original_triggers, vec!["push"]);
        assert_eq!(out.report_specs.len(), 1);
        assert_eq!(out.report_specs[0].report_dir, "reports/test");
    }

    #[test]
    fn undefined_matrix_axis_is_an_error() {
        let err = instrument(
            "on: push\njobs:\n  test:\n    runs-on: ${{ matrix.os }}\n    strategy:\n      matrix:\n        go: ['1.21']\n    steps:\n      - run: go test ./...\n",
        )
        .unwrap_err();
        assert!(matches!(err, WorkflowError::UndefinedMatrixAxis { ref axis, .. } if axis == "os"));
        let err = instrument(
            "on: push\njobs:\n  test:\n    runs-on: x\n    steps:\n      - run: go test ./... -tags ${{ matrix.tags }}\n",
        )
        .unwrap_err();
        assert!(matches!(err, WorkflowError::UndefinedMatrixAxis { .. }));
    }

    #[test]
    fn non_test_workflow_is_rejected() {
        assert!(matches!(
            instrument("on: push\njobs:\n  a:\n    runs-on: x\n    steps:\n      - run: make\n"),
            Err(WorkflowError::NotATestWorkflow(_))
        ));
    }

    #[test]
    fn output_is_deterministic_and_idempotent() {
        let doc = "name: ci\non: [push]\njobs:\n  test:\n    runs-on: ${{ matrix.os }}\n    strategy:\n      matrix:\n        os: [macos, ubuntu]\n        go: ['1.19', '1.20']\n    steps:\n      - uses: actions/setup-go@v5\n        with:\n          go-version: ${{ matrix.go }}\n      - run: go test ./...\n";
        let a = instrument(doc).unwrap();
        let b = instrument(doc).unwrap();
        assert_eq!(a.rewritten_document, b.rewritten_document);
        let again = instrument(&a.rewritten_document).unwrap();
        assert_eq!(again.rewritten_document, a.rewritten_document);
        assert_eq!(again.kept_jobs, a.kept_jobs);
        assert_eq!(again.report_specs, a.report_specs);
    }

    #[test]
    fn shadow_file_keeps_original_name() {
        let out = instrument("on: push\njobs:\n  t:\n    runs-on: x\n    steps:\n      - run: go test\n").unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = out.write_shadow(tmp.path()).unwrap();
        assert_eq!(p.file_name().unwrap(), "ci.yml");
        assert_eq!(fs::read_to_string(p).unwrap(), out.rewritten_document);
    }
}
