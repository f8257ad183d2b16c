//! In-memory backend that interprets `sim:` directives found in the checked
//! out tree instead of running a real workflow.
//!
//! Directives are comment lines (`//` or `#`) of the form `sim:<verb> ...`:
//!
//! | directive               | effect                                                  |
//! |-------------------------|---------------------------------------------------------|
//! | `provide k=v`           | the tree provides `k=v`                                 |
//! | `test Name k=v ...`     | test `Name` passes iff every listed pair is provided    |
//! | `skip Name`             | test `Name` is skipped                                  |
//! | `flaky Name`            | test `Name` fails on every second invocation            |
//! | `crash`                 | the run completes without writing a report              |
//! | `hang`                  | the run times out                                       |
//! | `dep X`                 | the run fetches `X` unless the base image caches it     |
//!
//! A test's suite is the `go.mod` module path joined with the directory of
//! the file declaring it. Flaky invocations are counted per repository and
//! test, for the lifetime of the backend.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendRun, ContainerBackend, ContainerRef, ExecutionRequest, ExecutionStatus, ImageRef,
    NetworkMode, RunnerError,
};
use crate::adapters::{ReportFormat, ReportSpec, REPORTS_DIR};

/// A scripted deviation for the run whose label matches exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Inverts pass/fail of the named test.
    FlipTest(String),
    /// The run ends as a runner failure.
    Fail(String),
    /// The run completes but leaves no report.
    DropReport,
    Timeout,
}

/// One recorded backend invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimulatedRun {
    pub label: String,
    pub repo: String,
    pub commit: String,
    pub network: NetworkMode,
    pub base_image: Option<String>,
    pub container: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tag: String,
    deps: BTreeSet<String>,
}

const MANIFEST_FORMAT: &str = "bugharvest-sim-image/1";

impl Manifest {
    fn bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    fn digest(&self) -> String {
        format!("sha256:{}", hex::encode(Sha256::digest(self.bytes())))
    }
}

struct Container {
    deps: BTreeSet<String>,
}

#[derive(Default)]
struct State {
    next_container: u64,
    containers: HashMap<String, Container>,
    images: HashMap<String, Manifest>,
    invocations: HashMap<(String, String), u64>,
    faults: HashMap<String, Fault>,
    runs: Vec<SimulatedRun>,
}

#[derive(Default)]
pub struct SimulatedBackend {
    state: Mutex<State>,
}

#[derive(Debug, Default)]
struct Tree {
    module: Option<String>,
    provides: BTreeSet<(String, String)>,
    tests: Vec<SimTest>,
    skip: BTreeSet<String>,
    flaky: BTreeSet<String>,
    deps: BTreeSet<String>,
    crash: bool,
    hang: bool,
}

#[derive(Debug)]
struct SimTest {
    dir: String,
    name: String,
    requires: Vec<(String, String)>,
}

impl SimulatedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject(&self, label: impl Into<String>, fault: Fault) {
        self.state.lock().unwrap().faults.insert(label.into(), fault);
    }

    pub fn runs(&self) -> Vec<SimulatedRun> {
        self.state.lock().unwrap().runs.clone()
    }

    /// Registers an image directly, as if built elsewhere.
    pub fn register_image(&self, tag: &str, deps: &[&str]) -> ImageRef {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            tag: tag.into(),
            deps: deps.iter().map(|d| d.to_string()).collect(),
        };
        let digest = manifest.digest();
        self.state.lock().unwrap().images.insert(tag.into(), manifest);
        ImageRef {
            tag: tag.into(),
            digest,
        }
    }

    pub fn forget_image(&self, tag: &str) {
        self.state.lock().unwrap().images.remove(tag);
    }
}

fn scan_tree(root: &Path) -> std::io::Result<Tree> {
    let mut tree = Tree::default();
    if let Ok(gomod) = fs::read_to_string(root.join("go.mod")) {
        tree.module = gomod
            .lines()
            .find_map(|l| l.trim().strip_prefix("module "))
            .map(|m| m.trim().to_string());
    }
    let walker = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            let n = e.file_name();
            e.depth() == 0 || (n != ".git" && !(e.depth() == 1 && n == REPORTS_DIR))
        });
    for entry in walker {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(text) = fs::read_to_string(entry.path()) else { continue };
        let rel_dir = entry
            .path()
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        for line in text.lines() {
            let t = line.trim_start();
            let Some(body) = t.strip_prefix("//").or_else(|| t.strip_prefix('#')) else {
                continue;
            };
            let Some(directive) = body.trim_start().strip_prefix("sim:") else { continue };
            let mut words = directive.split_whitespace();
            let verb = words.next().unwrap_or_default();
            let args: Vec<&str> = words.collect();
            let pairs = |args: &[&str]| -> Vec<(String, String)> {
                args.iter()
                    .filter_map(|a| a.split_once('='))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect()
            };
            match verb {
                "provide" => tree.provides.extend(pairs(&args)),
                "test" if !args.is_empty() => tree.tests.push(SimTest {
                    dir: rel_dir.clone(),
                    name: args[0].to_string(),
                    requires: pairs(&args[1..]),
                }),
                "skip" => tree.skip.extend(args.iter().map(|s| s.to_string())),
                "flaky" => tree.flaky.extend(args.iter().map(|s| s.to_string())),
                "dep" => tree.deps.extend(args.iter().map(|s| s.to_string())),
                "crash" => tree.crash = true,
                "hang" => tree.hang = true,
                _ => {}
            }
        }
    }
    Ok(tree)
}

fn suite_for(module: Option<&str>, dir: &str) -> String {
    match (module, dir.is_empty()) {
        (Some(m), true) => m.to_string(),
        (Some(m), false) => format!("{m}/{dir}"),
        (None, true) => ".".to_string(),
        (None, false) => dir.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimOutcome {
    Pass,
    Fail,
    Skip,
}

struct Case {
    suite: String,
    name: String,
    outcome: SimOutcome,
    message: String,
    elapsed: f64,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn render_go_json(cases: &[Case], module: &str) -> String {
    let mut out = String::new();
    let event = |v: serde_json::Value| serde_json::to_string(&v).unwrap() + "\n";
    if cases.is_empty() {
        out += &event(serde_json::json!({"Action": "skip", "Package": module, "Elapsed": 0.0}));
    }
    for c in cases {
        out += &event(serde_json::json!({"Action": "run", "Package": c.suite, "Test": c.name}));
        let action = match c.outcome {
            SimOutcome::Pass => "pass",
            SimOutcome::Fail => {
                out += &event(serde_json::json!({
                    "Action": "output", "Package": c.suite, "Test": c.name,
                    "Output": format!("    {}\n", c.message),
                }));
                "fail"
            }
            SimOutcome::Skip => "skip",
        };
        out += &event(serde_json::json!({
            "Action": action, "Package": c.suite, "Test": c.name, "Elapsed": c.elapsed,
        }));
    }
    out
}

fn render_junit(cases: &[Case]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<testsuites>\n");
    let mut by_suite: BTreeMap<&str, Vec<&Case>> = BTreeMap::new();
    for c in cases {
        by_suite.entry(&c.suite).or_default().push(c);
    }
    for (suite, cases) in by_suite {
        let _ = writeln!(out, "  <testsuite name=\"{}\" tests=\"{}\">", xml_escape(suite), cases.len());
        for c in cases {
            let _ = write!(
                out,
                "    <testcase classname=\"{}\" name=\"{}\" time=\"{:.3}\"",
                xml_escape(&c.suite),
                xml_escape(&c.name),
                c.elapsed
            );
            match c.outcome {
                SimOutcome::Pass => out += "/>\n",
                SimOutcome::Fail => {
                    let _ = writeln!(out, ">\n      <failure message=\"{}\"/>\n    </testcase>", xml_escape(&c.message));
                }
                SimOutcome::Skip => out += ">\n      <skipped/>\n    </testcase>\n",
            }
        }
        out += "  </testsuite>\n";
    }
    out += "</testsuites>\n";
    out
}

fn write_reports(workdir: &Path, specs: &[ReportSpec], cases: &[Case], module: &str) -> std::io::Result<()> {
    let Some(spec) = specs.first() else { return Ok(()) };
    if !spec.collect_globs.is_empty() {
        let dir = workdir.join("build/test-results/test");
        fs::create_dir_all(&dir)?;
        return fs::write(dir.join("TEST-sim.xml"), render_junit(cases));
    }
    let dir = workdir.join(&spec.report_dir);
    fs::create_dir_all(&dir)?;
    match spec.format {
        ReportFormat::GoJson => fs::write(dir.join("go-test.json"), render_go_json(cases, module)),
        ReportFormat::JunitXml => fs::write(dir.join("sim.xml"), render_junit(cases)),
    }
}

impl ContainerBackend for SimulatedBackend {
    fn name(&self) -> &str {
        "simulated"
    }

    fn runner_version(&self) -> Result<String, RunnerError> {
        Ok("simulated 1".into())
    }

    fn supports_network_isolation(&self) -> bool {
        true
    }

    fn image_exists(&self, image: &ImageRef) -> bool {
        self.state
            .lock()
            .unwrap()
            .images
            .get(&image.tag)
            .is_some_and(|m| m.digest() == image.digest)
    }

    fn run_workflow(&self, req: &ExecutionRequest, _shadow: &Path) -> Result<BackendRun, RunnerError> {
        let tree = scan_tree(&req.workdir)?;
        let mut state = self.state.lock().unwrap();
        let base_deps = match &req.base_image {
            Some(img) => state
                .images
                .get(&img.tag)
                .map(|m| m.deps.clone())
                .ok_or_else(|| RunnerError::ImageMissing(img.tag.clone()))?,
            None => BTreeSet::new(),
        };
        let id = format!("sim-{:06}", state.next_container);
        state.next_container += 1;
        let seq = state.runs.len() as u64;
        state.runs.push(SimulatedRun {
            label: req.label.clone(),
            repo: req.repo.clone(),
            commit: req.commit.clone(),
            network: req.network,
            base_image: req.base_image.as_ref().map(|i| i.tag.clone()),
            container: id.clone(),
        });
        let fault = state.faults.get(&req.label).cloned();
        let mut container = Container { deps: base_deps };
        let mut log = format!("[sim] run {} on {} ({:?})\n", req.label, req.commit, req.network);
        let container_ref = ContainerRef(id.clone());

        let done = |state: &mut State, container: Container, status, log: String, reason: Option<String>| {
            state.containers.insert(id.clone(), container);
            Ok(BackendRun {
                status,
                container: Some(container_ref.clone()),
                log,
                failure_reason: reason,
            })
        };

        if tree.hang || fault == Some(Fault::Timeout) {
            log += "[sim] timed out\n";
            return done(&mut state, container, ExecutionStatus::Timeout, log, Some("timeout".into()));
        }
        for dep in &tree.deps {
            if container.deps.contains(dep) {
                let _ = writeln!(log, "[sim] {dep}: cached");
            } else if req.network == NetworkMode::Isolated {
                let reason = format!("fetching {dep}: network is unreachable");
                let _ = writeln!(log, "[sim] {reason}");
                return done(&mut state, container, ExecutionStatus::RunnerFailure, log, Some(reason));
            } else {
                let _ = writeln!(log, "[sim] {dep}: downloaded");
                container.deps.insert(dep.clone());
            }
        }
        if let Some(Fault::Fail(reason)) = &fault {
            let _ = writeln!(log, "[sim] {reason}");
            return done(&mut state, container, ExecutionStatus::RunnerFailure, log, Some(reason.clone()));
        }
        if tree.crash || fault == Some(Fault::DropReport) {
            log += "[sim] process crashed before writing a report\n";
            return done(&mut state, container, ExecutionStatus::Completed, log, None);
        }

        let module = tree.module.as_deref();
        let mut cases = Vec::new();
        for t in &tree.tests {
            let suite = suite_for(module, &t.dir);
            let missing: Vec<String> = t
                .requires
                .iter()
                .filter(|kv| !tree.provides.contains(*kv))
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            let mut outcome = if missing.is_empty() { SimOutcome::Pass } else { SimOutcome::Fail };
            let mut message = format!("want {} (run {seq})", missing.join(", "));
            if tree.flaky.contains(&t.name) {
                let n = state
                    .invocations
                    .entry((req.repo.clone(), format!("{suite}/{}", t.name)))
                    .or_insert(0);
                if *n % 2 == 1 {
                    outcome = SimOutcome::Fail;
                    message = format!("flaky failure (run {seq})");
                }
                *n += 1;
            }
            if fault == Some(Fault::FlipTest(t.name.clone())) {
                outcome = match outcome {
                    SimOutcome::Pass => SimOutcome::Fail,
                    SimOutcome::Fail => SimOutcome::Pass,
                    SimOutcome::Skip => SimOutcome::Skip,
                };
                message = format!("injected divergence (run {seq})");
            }
            if tree.skip.contains(&t.name) {
                outcome = SimOutcome::Skip;
            }
            cases.push(Case {
                suite,
                name: t.name.clone(),
                outcome,
                message,
                elapsed: 0.001 * ((seq % 13) + 1) as f64,
            });
        }
        let module_name = module.unwrap_or(".");
        write_reports(&req.workdir, &req.workflow.report_specs, &cases, module_name)?;
        let _ = writeln!(log, "[sim] {} tests executed", cases.len());
        done(&mut state, container, ExecutionStatus::Completed, log, None)
    }

    fn commit(&self, container: &ContainerRef, tag: &str) -> Result<ImageRef, RunnerError> {
        let mut state = self.state.lock().unwrap();
        let c = state
            .containers
            .get(&container.0)
            .ok_or_else(|| RunnerError::AlreadyReleased(container.0.clone()))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            tag: tag.into(),
            deps: c.deps.clone(),
        };
        let digest = manifest.digest();
        state.images.insert(tag.into(), manifest);
        Ok(ImageRef {
            tag: tag.into(),
            digest,
        })
    }

    fn export(&self, image: &ImageRef, archive: &Path) -> Result<(), RunnerError> {
        let state = self.state.lock().unwrap();
        let manifest = state
            .images
            .get(&image.tag)
            .ok_or_else(|| RunnerError::ImageMissing(image.tag.clone()))?;
        fs::write(archive, manifest.bytes())?;
        Ok(())
    }

    fn import(&self, archive: &Path) -> Result<ImageRef, RunnerError> {
        let bytes = fs::read(archive)?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| RunnerError::Engine(format!("{}: not an image archive: {e}", archive.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(RunnerError::Engine(format!("unknown archive format {}", manifest.format)));
        }
        let image = ImageRef {
            tag: manifest.tag.clone(),
            digest: manifest.digest(),
        };
        self.state.lock().unwrap().images.insert(manifest.tag.clone(), manifest);
        Ok(image)
    }

    fn release(&self, container: &ContainerRef) -> Result<(), RunnerError> {
        self.state
            .lock()
            .unwrap()
            .containers
            .remove(&container.0)
            .map(|_| ())
            .ok_or_else(|| RunnerError::AlreadyReleased(container.0.clone()))
    }
}
