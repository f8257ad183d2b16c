//! Normalized test results and the report parsers that produce them.
//!
//! Two on-disk formats are accepted: JUnit-style XML (any `*.xml` file) and
//! the `go test -json` event stream (any `*.json` file). Every file found
//! under an artifact directory is parsed and merged into a single [`TestRun`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Skip,
    Error,
}

impl Outcome {
    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Fail | Outcome::Error)
    }

    /// Precedence used when the same case shows up in more than one report
    /// file. The worst outcome wins so that merging is order independent.
    fn severity(self) -> u8 {
        match self {
            Outcome::Skip => 0,
            Outcome::Pass => 1,
            Outcome::Fail => 2,
            Outcome::Error => 3,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Skip => "skip",
            Outcome::Error => "error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TestId {
    pub suite: String,
    pub name: String,
}

impl TestId {
    pub fn new(suite: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
        }
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.suite, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCaseResult {
    pub suite: String,
    pub name: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl TestCaseResult {
    pub fn new(suite: impl Into<String>, name: impl Into<String>, outcome: Outcome) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            outcome,
            message: None,
        }
    }

    pub fn id(&self) -> TestId {
        TestId::new(self.suite.clone(), self.name.clone())
    }
}

/// One `(suite, name, outcome)` triple; the unit of comparison between runs.
pub type OutcomeKey = (String, String, Outcome);

/// Per-test outcomes of a single execution.
///
/// Counts are always derived from `tests`; use [`TestRun::from_cases`] to
/// build one so the partition invariant holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TestRun {
    pub tests: Vec<TestCaseResult>,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub errored: usize,
    pub wall_time: f64,
}

impl TestRun {
    /// Builds a run, collapsing duplicate `(suite, name)` entries to their
    /// worst outcome and ordering cases by id.
    pub fn from_cases(cases: impl IntoIterator<Item = TestCaseResult>, wall_time: f64) -> Self {
        let mut by_id: BTreeMap<TestId, TestCaseResult> = BTreeMap::new();
        for case in cases {
            let id = case.id();
            match by_id.get_mut(&id) {
                Some(existing) => {
                    let replace = case.outcome.severity() > existing.outcome.severity()
                        || (case.outcome == existing.outcome && case.message > existing.message);
                    if replace {
                        *existing = case;
                    }
                }
                None => {
                    by_id.insert(id, case);
                }
            }
        }
        let tests: Vec<TestCaseResult> = by_id.into_values().collect();
        let count = |o: Outcome| tests.iter().filter(|t| t.outcome == o).count();
        Self {
            passed: count(Outcome::Pass),
            failed: count(Outcome::Fail),
            skipped: count(Outcome::Skip),
            errored: count(Outcome::Error),
            tests,
            wall_time,
        }
    }

    pub fn merge(runs: impl IntoIterator<Item = TestRun>) -> Self {
        let mut cases = Vec::new();
        let mut wall = 0.0;
        for run in runs {
            wall += run.wall_time;
            cases.extend(run.tests);
        }
        Self::from_cases(cases, wall)
    }

    pub fn total(&self) -> usize {
        self.tests.len()
    }

    /// Passing means at least one test ran and none failed or errored.
    /// Skipped tests do not affect the verdict.
    pub fn is_passing(&self) -> bool {
        !self.tests.is_empty() && self.failed == 0 && self.errored == 0
    }

    pub fn has_failures(&self) -> bool {
        self.failed + self.errored > 0
    }

    pub fn failing_tests(&self) -> Vec<TestId> {
        self.tests
            .iter()
            .filter(|t| t.outcome.is_failure())
            .map(TestCaseResult::id)
            .collect()
    }

    /// Sorted outcome triples. Messages and durations are deliberately not
    /// part of the key.
    pub fn outcome_multiset(&self) -> Vec<OutcomeKey> {
        let mut keys: Vec<OutcomeKey> = self
            .tests
            .iter()
            .map(|t| (t.suite.clone(), t.name.clone(), t.outcome))
            .collect();
        keys.sort();
        keys
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            total: self.total(),
            passed: self.passed,
            failed: self.failed,
            skipped: self.skipped,
            errored: self.errored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub errored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    JunitXml,
    GoJson,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no test report found in {0}")]
    ReportMissing(PathBuf),
    #[error("corrupt test report {path}: {reason}")]
    ReportCorrupt { path: PathBuf, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn corrupt(path: &Path, reason: impl Into<String>) -> ReportError {
    ReportError::ReportCorrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Collects every `*.xml` / `*.json` file below `dir`, sorted by path.
pub fn report_files(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = match fs::read_dir(&d) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(source) => return Err(ReportError::Io { path: d, source }),
        };
        for entry in entries {
            let entry = entry.map_err(|source| ReportError::Io {
                path: d.clone(),
                source,
            })?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if report_format_for(&path).is_some() {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn report_format_for(path: &Path) -> Option<ReportFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xml") => Some(ReportFormat::JunitXml),
        Some("json") => Some(ReportFormat::GoJson),
        _ => None,
    }
}

/// Parses and merges all report files in `dir`.
pub fn parse_report_dir(dir: &Path) -> Result<TestRun, ReportError> {
    let files = report_files(dir)?;
    if files.is_empty() {
        return Err(ReportError::ReportMissing(dir.to_path_buf()));
    }
    parse_report_files(&files)
}

pub fn parse_report_files(files: &[PathBuf]) -> Result<TestRun, ReportError> {
    let mut runs = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        let run = match report_format_for(path) {
            Some(ReportFormat::JunitXml) => parse_junit_xml(&text).map_err(|r| corrupt(path, r))?,
            Some(ReportFormat::GoJson) => parse_go_json(&text).map_err(|r| corrupt(path, r))?,
            None => continue,
        };
        runs.push(run);
    }
    Ok(TestRun::merge(runs))
}

/// Parses a JUnit-style XML document (`<testsuites>` or a bare `<testsuite>`).
///
/// The suite of a case is its `classname` attribute, falling back to the
/// name of the nearest enclosing `<testsuite>`.
pub fn parse_junit_xml(text: &str) -> Result<TestRun, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    match root.tag_name().name() {
        "testsuites" | "testsuite" => {}
        other => return Err(format!("unexpected root element <{other}>")),
    }

    let mut cases = Vec::new();
    let mut wall = 0.0;
    for node in root.descendants().filter(|n| n.has_tag_name("testcase")) {
        let name = node
            .attribute("name")
            .ok_or_else(|| "testcase without a name attribute".to_string())?;
        let enclosing_suite = node
            .ancestors()
            .find(|a| a.has_tag_name("testsuite"))
            .and_then(|s| s.attribute("name"));
        let suite = node
            .attribute("classname")
            .filter(|c| !c.is_empty())
            .or(enclosing_suite)
            .unwrap_or("")
            .to_string();
        if let Some(t) = node.attribute("time") {
            wall += t.trim().parse::<f64>().unwrap_or(0.0);
        }

        let mut outcome = Outcome::Pass;
        let mut message = None;
        for child in node.children().filter(|c| c.is_element()) {
            let found = match child.tag_name().name() {
                "failure" => Outcome::Fail,
                "error" => Outcome::Error,
                "skipped" => Outcome::Skip,
                _ => continue,
            };
            if found.severity() > outcome.severity() || outcome == Outcome::Pass {
                outcome = found;
                message = child
                    .attribute("message")
                    .map(str::to_string)
                    .or_else(|| child.text().map(|t| t.trim().to_string()))
                    .filter(|m| !m.is_empty());
            }
        }
        cases.push(TestCaseResult {
            suite,
            name: name.to_string(),
            outcome,
            message,
        });
    }
    Ok(TestRun::from_cases(cases, wall))
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct GoEvent {
    action: String,
    #[serde(default)]
    package: Option<String>,
    #[serde(default)]
    test: Option<String>,
    #[serde(default)]
    elapsed: Option<f64>,
    #[serde(default)]
    output: Option<String>,
}

/// Parses a `go test -json` event stream.
///
/// Lines that are not JSON (build noise interleaved by the shell) are
/// ignored; a stream with no events at all is rejected. Tests that start but
/// never report a terminal action are counted as errors, and a package that
/// fails without any test-level result (build failure) yields one synthetic
/// errored case named `(package)`.
pub fn parse_go_json(text: &str) -> Result<TestRun, String> {
    let mut events = 0usize;
    // (package, test) -> (outcome, output lines, elapsed)
    type Seen = (Option<Outcome>, Vec<String>, f64);
    let mut tests: BTreeMap<(String, String), Seen> = BTreeMap::new();
    let mut package_fail: BTreeMap<String, bool> = BTreeMap::new();
    let mut wall = 0.0;

    for line in text.lines() {
        let line = line.trim();
        if !line.starts_with('{') {
            continue;
        }
        let Ok(ev) = serde_json::from_str::<GoEvent>(line) else {
            continue;
        };
        events += 1;
        let package = ev.package.unwrap_or_default();
        match ev.test {
            Some(test) => {
                let entry = tests
                    .entry((package, test))
                    .or_insert_with(|| (None, Vec::new(), 0.0));
                match ev.action.as_str() {
                    "pass" => entry.0 = Some(Outcome::Pass),
                    "fail" => entry.0 = Some(Outcome::Fail),
                    "skip" => entry.0 = Some(Outcome::Skip),
                    "output" => {
                        if let Some(out) = ev.output {
                            entry.1.push(out);
                        }
                    }
                    _ => {}
                }
                if let Some(e) = ev.elapsed {
                    entry.2 = e;
                }
            }
            None => match ev.action.as_str() {
                "fail" => {
                    package_fail.insert(package, true);
                    wall += ev.elapsed.unwrap_or(0.0);
                }
                "pass" | "skip" => {
                    package_fail.entry(package).or_insert(false);
                    wall += ev.elapsed.unwrap_or(0.0);
                }
                _ => {}
            },
        }
    }
    if events == 0 {
        return Err("no go test events in stream".into());
    }

    let mut cases = Vec::new();
    for ((package, test), (outcome, output, _)) in &tests {
        let outcome = outcome.unwrap_or(Outcome::Error);
        let message = if outcome.is_failure() {
            let joined: String = output.concat().trim().to_string();
            (!joined.is_empty()).then_some(joined)
        } else {
            None
        };
        cases.push(TestCaseResult {
            suite: package.clone(),
            name: test.clone(),
            outcome,
            message,
        });
    }
    for (package, failed) in package_fail {
        let has_cases = tests.keys().any(|(p, _)| *p == package);
        if failed && !has_cases {
            cases.push(TestCaseResult {
                suite: package,
                name: "(package)".into(),
                outcome: Outcome::Error,
                message: Some("package failed without test results".into()),
            });
        }
    }
    Ok(TestRun::from_cases(cases, wall))
}
