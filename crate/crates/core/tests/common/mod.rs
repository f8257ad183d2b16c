//! Checks shared by the integration tests and the acceptance target. Each
//! returns a one-line detail on success and a description of the first
//! violated expectation otherwise.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use chrono::{NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bugharvest_core::adapters::report::{parse_report_dir, parse_report_files, report_files};
use bugharvest_core::adapters::{AdapterRegistry, GoAdapter, Outcome, ReportError, RunSummary, TestCaseResult, TestRun};
use bugharvest_core::fixture::{go_skeleton, synthetic_corpus, RepoBuilder, SyntheticCorpus, GO_WORKFLOW};
use bugharvest_core::git::Git;
use bugharvest_core::miner::{
    entry_id, enumerate_pairs, match_patterns, trisect_patch, BugFixCandidate, CommitPair, DateWindow,
    MatchOutcome, WorktreeExecutor, WorktreeExecutorConfig,
};
use bugharvest_core::pipeline::{
    Pipeline, PipelineConfig, PipelineError, Stage, StageLedger, BUNDLES_FILE, MINED_FILE, REPOS_FILE,
    VERIFY_FILE,
};
use bugharvest_core::runner::{
    ActBackend, ActConfig, AuditEvent, ContainerBackend, Fault, NetworkMode, Runner, SimulatedBackend,
};
use bugharvest_core::store::{
    build_bundle, checkout_version, flakiness_filter, load_benchmark, BenchmarkEntry, BundleOutcome,
    HistorySource, Mode, ReproducerConfig, StoreError, Verdict, ARCHIVE_FILE, ENTRY_FILE,
};
use bugharvest_core::workflow::{instrument_workflow, parse_workflow, InstrumentOptions};

pub type Check = Result<String, String>;

/// Outcome of a criterion that may not be runnable on this machine.
pub enum Optional {
    Ran(Check),
    Skipped(String),
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tmp() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(e2s("tempdir"))
}

fn january() -> DateWindow {
    DateWindow::new(
        NaiveDate::from_ymd_opt(2023, 1, 1).unwrap(),
        NaiveDate::from_ymd_opt(2023, 1, 31).unwrap(),
    )
    .unwrap()
}

fn sim() -> (Arc<SimulatedBackend>, Arc<dyn ContainerBackend>) {
    let b = Arc::new(SimulatedBackend::new());
    let d: Arc<dyn ContainerBackend> = b.clone();
    (b, d)
}

/// Every file below `root` with its bytes, keyed by relative path.
pub fn file_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().display().to_string();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

// ---- mining ----

pub struct MinedPair {
    pub pair: CommitPair,
    pub outcome: MatchOutcome,
}

/// Mines every January pair of the repository at `url` the way the
/// pipeline does: full mirror, private worktree, current variant first.
pub fn mine_repo(name: &str, url: &str, work: &Path, runner: &Runner) -> Result<(PathBuf, Vec<MinedPair>), String> {
    let slug = name.replace('/', "__");
    let mirror = work.join(format!("mirror-{slug}"));
    let git = Git::clone_full(url, &mirror).map_err(e2s("clone"))?;
    let pairs = enumerate_pairs(&git, "HEAD", &january()).map_err(e2s("enumerate"))?;
    let mut exec = WorktreeExecutor::new(
        name,
        git.clone(),
        &work.join(format!("scratch-{slug}")),
        runner,
        &GoAdapter,
        WorktreeExecutorConfig::default(),
    )
    .map_err(e2s("worktree"))?;
    let mut out = Vec::new();
    for pair in pairs {
        let triple = trisect_patch(&git, &pair, &GoAdapter).map_err(e2s("trisect"))?;
        let outcome = match_patterns(name, &pair, &triple, &mut exec).map_err(e2s("match"))?;
        out.push(MinedPair { pair, outcome });
    }
    drop(exec);
    Ok((mirror, out))
}

pub fn corpus_pipeline_config(root: &Path, corpus: &SyntheticCorpus, run: &str, workers: usize) -> PipelineConfig {
    PipelineConfig {
        workers,
        state_dir: root.join(run).join("state"),
        store_dir: root.join(run).join("store"),
        cache_dir: root.join(run).join("cache"),
        seed_repos: corpus.repos.clone(),
        offline_only: true,
        created_at: Some(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()),
        ..PipelineConfig::default()
    }
}

/// Criterion 1: the twelve-pair corpus yields exactly its four positives.
pub fn pattern_oracle() -> Check {
    let started = Instant::now();
    let tmp = tmp()?;
    let corpus = synthetic_corpus(&tmp.path().join("corpus")).map_err(e2s("corpus"))?;
    ensure!(corpus.pair_count() == 12, "corpus has {} pairs", corpus.pair_count());
    ensure!(corpus.positives.len() == 4, "corpus declares {} positives", corpus.positives.len());

    let (_, backend) = sim();
    let runner = Runner::new(backend, tmp.path().join("logs"), 4);
    let mut found = Vec::new();
    let mut examined = 0;
    for repo in &corpus.repos {
        let (_, mined) = mine_repo(&repo.full_name, &repo.clone_url, tmp.path(), &runner)?;
        for m in mined {
            examined += 1;
            let negative = corpus
                .negatives
                .iter()
                .find(|n| n.repo == repo.full_name && n.current == m.pair.current);
            match (m.outcome, negative) {
                (MatchOutcome::Candidate(c), None) => found.push(*c),
                (MatchOutcome::Candidate(c), Some(n)) => {
                    return Err(format!("negative {} ({}) accepted as {}", n.current, n.kind, c.pattern))
                }
                (MatchOutcome::Rejected(reason), Some(n)) => {
                    let ok = match n.kind {
                        "flaky" => reason.ends_with("_not_passing") || reason.ends_with("_not_failing"),
                        kind => reason == kind,
                    };
                    ensure!(ok, "{} {}: expected {}, got {reason}", n.repo, n.current, n.kind);
                }
                (MatchOutcome::Skipped(reason), Some(n)) => {
                    return Err(format!("{} {} skipped ({reason}); expected {}", n.repo, n.current, n.kind))
                }
                (other, None) => {
                    return Err(format!("positive {} {} not accepted: {other:?}", repo.full_name, m.pair.current))
                }
            }
        }
    }
    ensure!(examined == 12, "mined {examined} pairs, expected 12");
    let got: BTreeSet<_> = found
        .iter()
        .map(|c| (c.repo.clone(), c.pair.previous.clone(), c.pair.current.clone(), c.pattern, c.failing_tests.clone()))
        .collect();
    let want: BTreeSet<_> = corpus
        .positives
        .iter()
        .map(|p| (p.repo.clone(), p.previous.clone(), p.current.clone(), p.pattern, p.failing_tests.clone()))
        .collect();
    ensure!(got == want, "candidates differ:\n got  {got:?}\n want {want:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs() < 60, "took {elapsed:?}, limit 60 s");
    Ok(format!("4/4 positives, 8/8 negatives rejected, {:.1} s", elapsed.as_secs_f64()))
}

// ---- instrumentation ----

/// Markers that make each golden demonstrate one rewrite.
const GOLDEN_MARKERS: &[(&str, &[&str], &[&str])] = &[
    (
        "multi_axis_matrix",
        &["runs-on: ubuntu-latest", "os:\n        - ubuntu-22.04\n", "- '1.21'\n", "- true\n", "go test -json"],
        &["macos-13", "windows-2022", "'1.20'", "- false"],
    ),
    (
        "needs_chain",
        &["setup:", "deps:", "compile:", "unit:", "runs-on: ubuntu-latest\n    steps:\n    - uses: actions/checkout@v4\n    - uses: actions/setup-java", "reportsDirectory"],
        &["publish", "lint", "deploy", "ubuntu-20.04"],
    ),
    ("mixed_test_deploy", &["--junitxml=", "- '3.11'\n", "on: workflow_dispatch"], &["deploy", "docs", "secrets", "'3.10'"]),
    ("gradle_single", &["on: workflow_dispatch", "./gradlew build"], &["push"]),
];

fn instrument_case(dir: &Path, registry: &AdapterRegistry) -> Result<Result<String, String>, String> {
    let adapter_id = fs::read_to_string(dir.join("adapter")).map_err(e2s("adapter file"))?;
    let adapter = registry.get(adapter_id.trim()).map_err(e2s("adapter"))?;
    let input = fs::read_to_string(dir.join("input.yml")).map_err(e2s("input.yml"))?;
    let path = ".github/workflows/ci.yml";
    let options = InstrumentOptions::default();
    let first = match parse_workflow(path, &input).and_then(|wf| instrument_workflow(&wf, adapter, &options)) {
        Ok(out) => out.rewritten_document,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let again = parse_workflow(path, &first)
        .and_then(|wf| instrument_workflow(&wf, adapter, &options))
        .map_err(e2s("re-instrumenting the output"))?;
    ensure!(again.rewritten_document == first, "{}: instrumentation is not idempotent", dir.display());
    Ok(Ok(first))
}

/// Criterion 2: byte-exact golden rewrites and idempotence.
pub fn instrumentation_goldens() -> Check {
    let root = fixtures().join("workflows");
    let registry = AdapterRegistry::with_builtin();
    let mut cases: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(e2s("fixtures"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cases.sort();
    ensure!(cases.len() >= 5, "only {} golden cases", cases.len());
    let (mut rewrites, mut errors) = (0, 0);
    for dir in &cases {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let expected = dir.join("expected.yml");
        match instrument_case(dir, &registry)? {
            Ok(out) => {
                let golden = fs::read_to_string(&expected).map_err(|_| format!("{name}: rewrote but has no expected.yml"))?;
                ensure!(out == golden, "{name}: output differs from expected.yml:\n{out}");
                if let Some((_, present, absent)) = GOLDEN_MARKERS.iter().find(|(n, ..)| *n == name) {
                    for m in *present {
                        ensure!(out.contains(m), "{name}: rewrite lacks {m:?}");
                    }
                    for m in *absent {
                        ensure!(!out.contains(m), "{name}: rewrite still contains {m:?}");
                    }
                }
                ensure!(!out.contains("on:\n  push") && out.contains("on: workflow_dispatch"), "{name}: trigger not replaced");
                rewrites += 1;
            }
            Err(message) => {
                let golden = fs::read_to_string(dir.join("expected_error.txt"))
                    .map_err(|_| format!("{name}: failed ({message}) but has no expected_error.txt"))?;
                ensure!(message == golden.trim_end(), "{name}: error {message:?} != {:?}", golden.trim_end());
                errors += 1;
            }
        }
    }
    Ok(format!("{rewrites} rewrites and {errors} rejections match their goldens, all idempotent"))
}

// ---- reports ----

fn expected_summary(dir: &Path) -> Result<RunSummary, String> {
    let text = fs::read_to_string(dir.join("expected.toml")).map_err(e2s("expected.toml"))?;
    toml::from_str(&text).map_err(e2s("expected.toml"))
}

/// Per-file runs of the multi-file fixture.
pub fn multi_file_runs() -> Result<Vec<TestRun>, String> {
    let files = report_files(&fixtures().join("reports/multi_file")).map_err(e2s("list"))?;
    files
        .iter()
        .map(|f| parse_report_files(std::slice::from_ref(f)).map_err(e2s("parse")))
        .collect()
}

/// Merging in any order and grouping gives the same run.
pub fn merge_agrees(runs: &[TestRun], order: &[usize], split: usize) -> Result<(), String> {
    let reference = TestRun::merge(runs.to_vec());
    let shuffled: Vec<TestRun> = order.iter().map(|i| runs[*i].clone()).collect();
    let split = split.min(shuffled.len());
    let left = TestRun::merge(shuffled[..split].to_vec());
    let right = TestRun::merge(shuffled[split..].to_vec());
    let nested = TestRun::merge([left, right]);
    let flat = TestRun::merge(shuffled);
    for (what, run) in [("flat", &flat), ("nested", &nested)] {
        ensure!(run.tests == reference.tests, "{what} merge of {order:?} / {split} changed the cases");
        ensure!(run.summary() == reference.summary(), "{what} merge of {order:?} changed the counts");
        if (run.wall_time - reference.wall_time).abs() >= 1e-9 {
            return Err(format!("{what} merge changed wall time"));
        }
    }
    Ok(())
}

/// Criterion 3: golden counts, merge order independence, missing vs empty.
pub fn report_conformance() -> Check {
    let root = fixtures().join("reports");
    for case in ["junit_mixed", "go_stream", "multi_file", "zero_tests"] {
        let dir = root.join(case);
        let run = parse_report_dir(&dir).map_err(e2s(case))?;
        let want = expected_summary(&dir)?;
        ensure!(run.summary() == want, "{case}: got {:?}, expected {want:?}", run.summary());
        let s = run.summary();
        ensure!(s.passed + s.failed + s.skipped + s.errored == s.total, "{case}: counts do not partition");
    }

    let junit = parse_report_dir(&root.join("junit_mixed")).unwrap();
    let outcome = |run: &TestRun, name: &str| run.tests.iter().find(|t| t.name == name).map(|t| (t.suite.clone(), t.outcome));
    ensure!(
        outcome(&junit, "rejectsBinary") == Some(("io.ReaderTest".into(), Outcome::Fail)),
        "empty classname must fall back to the enclosing suite"
    );
    let go = parse_report_dir(&root.join("go_stream")).unwrap();
    ensure!(
        outcome(&go, "TestHang").map(|o| o.1) == Some(Outcome::Error),
        "a test without a terminal event must count as errored"
    );
    ensure!(
        outcome(&go, "(package)") == Some(("example.com/shop/c".into(), Outcome::Error)),
        "a build failure must yield one errored package case"
    );

    let runs = multi_file_runs()?;
    ensure!(runs.len() == 3, "multi_file has {} report files", runs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let trials = 200;
    for _ in 0..trials {
        let mut order: Vec<usize> = (0..runs.len()).collect();
        order.shuffle(&mut rng);
        let split = rng.gen_range(0..=runs.len());
        merge_agrees(&runs, &order, split)?;
    }

    let t = tmp()?;
    match parse_report_dir(t.path()) {
        Err(ReportError::ReportMissing(_)) => {}
        other => return Err(format!("empty directory gave {other:?}")),
    }
    let zero = parse_report_dir(&root.join("zero_tests")).map_err(e2s("zero_tests"))?;
    ensure!(zero.total() == 0 && !zero.is_passing(), "a 0-test report must parse and must not count as passing");
    Ok(format!("4 golden fixtures exact, {trials} randomized merge orders agree, missing != empty"))
}

// ---- verification ----

/// A repository whose buggy version needs a dependency its fixed version
/// dropped, so the snapshot taken from the fixed run cannot serve it.
pub fn offline_dependency_repo(dir: &Path) -> Result<String, String> {
    let b = RepoBuilder::init(dir).map_err(e2s("init"))?;
    go_skeleton(&b, "example.com/offline");
    b.write("calc.go", "package offline\n\n//sim:provide add=ok\n");
    b.write("calc_test.go", "package offline\n\n//sim:test TestAdd add=ok\n");
    b.commit("initial", "2022-12-30T12:00:00Z").map_err(e2s("commit"))?;
    b.write("calc.go", "package offline\n\n//sim:dep example.com/legacy@v1.2.0\n//sim:provide add=broken\n");
    b.commit("use legacy adder", "2023-01-03T10:00:00Z").map_err(e2s("commit"))?;
    b.write("calc.go", "package offline\n\n//sim:provide add=ok\n");
    b.commit("drop legacy adder", "2023-01-04T10:00:00Z").map_err(e2s("commit"))?;
    Ok(dir.display().to_string())
}

fn only_candidate(mined: Vec<MinedPair>, current: Option<&str>) -> Result<BugFixCandidate, String> {
    let mut c: Vec<BugFixCandidate> = mined
        .into_iter()
        .filter(|m| current.is_none_or(|s| m.pair.current == s))
        .filter_map(|m| m.outcome.candidate())
        .collect();
    ensure!(c.len() == 1, "expected one candidate, mined {}", c.len());
    Ok(c.remove(0))
}

fn bundle(
    candidate: &BugFixCandidate,
    url: &str,
    mirror: &Path,
    runner: &Runner,
    config: &ReproducerConfig,
) -> Result<BenchmarkEntry, String> {
    match build_bundle(candidate, url, "ci.yml", mirror, runner, &GoAdapter, config).map_err(e2s("bundle"))? {
        BundleOutcome::Built(b) => Ok(b.draft),
        BundleOutcome::Dropped(reason) => Err(format!("bundle dropped: {reason}")),
    }
}

/// Criterion 4: K=5 stability, an injected divergence, an offline fetch.
pub fn flakiness_filter_check() -> Check {
    let t = tmp()?;
    let corpus = synthetic_corpus(&t.path().join("corpus")).map_err(e2s("corpus"))?;
    let alpha = &corpus.repos[0];
    let (backend, dynb) = sim();
    let runner = Runner::new(dynb, t.path().join("logs"), 4);
    let mut config = ReproducerConfig::new(t.path().join("images"), t.path().join("work"));
    ensure!(config.k == 5, "default K is {}", config.k);
    config.created_at = Some(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap());

    let p2 = corpus
        .positives
        .iter()
        .find(|p| p.repo == alpha.full_name && p.failing_tests.iter().any(|t| t.name == "TestAdd"))
        .ok_or("corpus lacks the TestAdd positive")?;
    let (mirror, mined) = mine_repo(&alpha.full_name, &alpha.clone_url, t.path(), &runner)?;
    let candidate = only_candidate(mined, Some(&p2.current))?;
    let draft = bundle(&candidate, &alpha.clone_url, &mirror, &runner, &config)?;
    let id = draft.id.clone();
    let verify_runs = |b: &SimulatedBackend| {
        b.runs()
            .into_iter()
            .filter(|r| r.label.starts_with(&format!("verify:{id}:")))
            .collect::<Vec<_>>()
    };

    let before = verify_runs(&backend).len();
    let stable = flakiness_filter(&draft, &mirror, &runner, &GoAdapter, &config).map_err(e2s("filter"))?;
    let executed = verify_runs(&backend);
    ensure!(stable.verdict == Verdict::Stable, "deterministic candidate judged {:?}: {:?}", stable.verdict, stable.reason);
    ensure!(stable.runs.len() == 10 && executed.len() - before == 10, "stable verdict after {} runs", stable.runs.len());
    let modes: Vec<Mode> = stable.runs.iter().map(|r| r.mode).collect();
    ensure!(
        modes.iter().filter(|m| **m == Mode::Buggy).count() == 5 && modes.iter().filter(|m| **m == Mode::Fixed).count() == 5,
        "runs per mode are not 5 + 5: {modes:?}"
    );
    ensure!(
        stable.runs.iter().all(|r| r.network == NetworkMode::Isolated)
            && executed.iter().all(|r| r.network == NetworkMode::Isolated && r.base_image.is_some()),
        "a verification run was not isolated on the frozen image"
    );

    backend.inject(format!("verify:{id}:buggy:3"), Fault::FlipTest("TestAdd".into()));
    let flaky = flakiness_filter(&draft, &mirror, &runner, &GoAdapter, &config).map_err(e2s("filter"))?;
    ensure!(flaky.verdict == Verdict::Flaky, "divergence at buggy run 3 judged {:?}", flaky.verdict);
    let last = flaky.runs.last().unwrap();
    ensure!(
        last.mode == Mode::Buggy && last.attempt == 3 && flaky.runs.len() == 5,
        "filter did not stop at the divergent run ({} runs)",
        flaky.runs.len()
    );

    // durations and messages are not part of the comparison
    let a = TestRun::from_cases(
        [TestCaseResult { message: Some("x".into()), ..TestCaseResult::new("s", "T", Outcome::Fail) }],
        1.0,
    );
    let b = TestRun::from_cases(
        [TestCaseResult { message: Some("y".into()), ..TestCaseResult::new("s", "T", Outcome::Fail) }],
        9.0,
    );
    ensure!(a.outcome_multiset() == b.outcome_multiset(), "message or duration leaks into the outcome comparison");

    let url = offline_dependency_repo(&t.path().join("offline"))?;
    let (mirror, mined) = mine_repo("acc/offline", &url, t.path(), &runner)?;
    let candidate = only_candidate(mined, None)?;
    let draft = bundle(&candidate, &url, &mirror, &runner, &config)?;
    let offline = flakiness_filter(&draft, &mirror, &runner, &GoAdapter, &config).map_err(e2s("filter"))?;
    ensure!(
        offline.verdict == Verdict::OfflineFailure,
        "uncached dependency judged {:?}: {:?}",
        offline.verdict,
        offline.reason
    );
    let reason = offline.reason.unwrap_or_default();
    ensure!(reason.contains("network is unreachable"), "offline failure reason {reason:?}");
    ensure!(runner.live_containers().is_empty(), "containers leaked: {:?}", runner.live_containers());
    Ok("stable after 5+5 isolated runs; flaky at buggy run 3; uncached fetch is offline_failure".into())
}

// ---- trisection ----

const POOL: &[&str] = &[
    "cmd/app/main.go",
    "pkg/calc.go",
    "pkg/calc_test.go",
    "pkg/io.go",
    "pkg/io_test.go",
    "internal/weird name.go",
    "internal/weird name_test.go",
    "docs/guide.md",
    "go.mod",
    "README.md",
    "assets/logo.bin",
    "config/app.yaml",
    "scripts/run.sh",
    "legacy.go",
];

fn class_of(path: &str) -> u8 {
    if path.ends_with("_test.go") {
        1
    } else if path.ends_with(".go") {
        0
    } else {
        2
    }
}

fn random_content(rng: &mut ChaCha8Rng, path: &str, n: usize) -> Vec<u8> {
    if path.ends_with(".bin") {
        (0..rng.gen_range(8..64)).map(|_| rng.gen::<u8>()).collect()
    } else if path == "legacy.go" {
        // latin-1 comment, not valid UTF-8
        let mut v = b"package legacy\n// caf".to_vec();
        v.push(0xe9);
        v.extend(format!(" {n}\n").bytes());
        v
    } else {
        let lines: Vec<String> = (0..rng.gen_range(1..6)).map(|i| format!("line {n}.{i} {}", rng.gen::<u32>())).collect();
        (lines.join("\n") + "\n").into_bytes()
    }
}

pub struct TrisectionStats {
    pub commits: usize,
    pub files_changed: usize,
}

/// Criterion 5 over one generated history of `commits` random commits.
pub fn trisection_partition(seed: u64, commits: usize) -> Result<TrisectionStats, String> {
    let t = tmp()?;
    let b = RepoBuilder::init(&t.path().join("r")).map_err(e2s("init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut present: BTreeSet<&str> = BTreeSet::new();
    for p in ["pkg/calc.go", "pkg/calc_test.go", "go.mod", "scripts/run.sh"] {
        b.write(p, random_content(&mut rng, p, 0));
        present.insert(p);
    }
    let base = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
    let mut shas = vec![b.commit("root", &base.to_rfc3339()).map_err(e2s("commit"))?];
    for n in 1..=commits {
        for _ in 0..rng.gen_range(1..=4) {
            let path = *POOL.choose(&mut rng).unwrap();
            let exists = present.contains(path);
            if exists && rng.gen_bool(0.3) {
                b.remove(path);
                present.remove(path);
            } else if exists && path.ends_with(".sh") && rng.gen_bool(0.5) {
                toggle_exec(&b.dir().join(path))?;
            } else {
                b.write(path, random_content(&mut rng, path, n));
                present.insert(path);
            }
        }
        let date = (base + chrono::Duration::minutes(n as i64)).to_rfc3339();
        shas.push(b.commit(&format!("c{n}"), &date).map_err(e2s("commit"))?);
    }

    let git = b.git();
    let mut files_changed = 0;
    for w in shas.windows(2) {
        let pair = CommitPair {
            previous: w[0].clone(),
            current: w[1].clone(),
            author_date: base.fixed_offset(),
        };
        let changed: BTreeSet<String> = git.changed_paths(&pair.previous, &pair.current).map_err(e2s("changed"))?.into_iter().collect();
        let tri = trisect_patch(git, &pair, &GoAdapter).map_err(e2s("trisect"))?;
        let total = tri.source_files.len() + tri.test_files.len() + tri.non_code_files.len();
        let union: BTreeSet<String> = tri.all_files().into_iter().map(str::to_string).collect();
        ensure!(union == changed, "{}: files {union:?} != changed {changed:?}", pair.current);
        ensure!(total == changed.len(), "{}: a file appears in two patches", pair.current);
        for (class, files) in [(0, &tri.source_files), (1, &tri.test_files), (2, &tri.non_code_files)] {
            ensure!(files.iter().all(|f| class_of(f) == class), "{}: misrouted file in {files:?}", pair.current);
        }
        files_changed += total;

        git.checkout_clean(&pair.previous).map_err(e2s("checkout"))?;
        let mut patches = [&tri.source_patch, &tri.test_patch, &tri.non_code_patch];
        patches.shuffle(&mut rng);
        for p in patches {
            git.apply(p).map_err(|e| format!("{}: patch does not apply: {e}", pair.current))?;
        }
        let got = git.worktree_tree_hash().map_err(e2s("hash"))?;
        let want = git.tree_of(&pair.current).map_err(e2s("tree"))?;
        ensure!(got == want, "{}: reapplied tree {got} != current tree {want}", pair.current);
    }
    Ok(TrisectionStats { commits, files_changed })
}

#[cfg(unix)]
fn toggle_exec(path: &Path) -> Result<(), String> {
    use std::os::unix::fs::PermissionsExt;
    let mut perm = fs::metadata(path).map_err(e2s("stat"))?.permissions();
    perm.set_mode(perm.mode() ^ 0o111);
    fs::set_permissions(path, perm).map_err(e2s("chmod"))
}

#[cfg(not(unix))]
fn toggle_exec(_: &Path) -> Result<(), String> {
    Ok(())
}

pub fn trisection_check() -> Check {
    let s = trisection_partition(7, 120)?;
    Ok(format!("{} random commits, {} changed files partitioned and reproduced", s.commits, s.files_changed))
}

// ---- store ----

fn snapshot_commit(git: &Git) -> Result<String, String> {
    git.run(["add", "-A", "."]).map_err(e2s("add"))?;
    let tree = git.run(["write-tree"]).map_err(e2s("write-tree"))?;
    let commit = git
        .run(["-c", "user.name=check", "-c", "user.email=check@example.com", "commit-tree", tree.trim(), "-m", "snapshot"])
        .map_err(e2s("commit-tree"))?;
    Ok(commit.trim().to_string())
}

fn run_corpus(root: &Path, corpus: &SyntheticCorpus, run: &str, workers: usize) -> Result<(Pipeline, StageLedger), String> {
    let (_, backend) = sim();
    let p = Pipeline::new(corpus_pipeline_config(root, corpus, run, workers), backend).map_err(e2s("pipeline"))?;
    let ledger = p.run_all().map_err(e2s("run"))?;
    Ok((p, ledger))
}

/// Criterion 6: checkout from the loaded store reproduces the stored
/// source patch, and tampering is caught.
pub fn store_round_trip() -> Check {
    let t = tmp()?;
    let corpus = synthetic_corpus(&t.path().join("corpus")).map_err(e2s("corpus"))?;
    let (p, _) = run_corpus(t.path(), &corpus, "run", 4)?;
    let store = p.config().store_dir.clone();
    let entries = load_benchmark(&store).map_err(e2s("load"))?;
    ensure!(entries.len() == 4, "store holds {} entries", entries.len());

    for e in &entries {
        let mut commits = std::collections::HashMap::new();
        for mode in [Mode::Buggy, Mode::Fixed] {
            let dest = t.path().join(format!("co-{}-{mode}", e.id));
            let tree = checkout_version(e, mode, &dest, &HistorySource::Remote).map_err(e2s("checkout"))?;
            let git = Git::open(&dest);
            let commit = snapshot_commit(&git)?;
            let snap_tree = git.tree_of(&commit).map_err(e2s("tree"))?;
            ensure!(snap_tree == tree.tree_hash, "{} {mode}: reported tree hash differs from the checkout", e.id);
            git.run(["update-ref", "refs/heads/snapshot", &commit]).map_err(e2s("update-ref"))?;
            commits.insert(mode, (dest, commit));
        }
        let (buggy_dir, buggy) = &commits[&Mode::Buggy];
        let (fixed_dir, fixed) = &commits[&Mode::Fixed];
        let git = Git::open(fixed_dir);
        git.run(["fetch", "-q", &buggy_dir.display().to_string(), "refs/heads/snapshot:refs/heads/buggy"])
            .map_err(e2s("fetch"))?;
        let pair = CommitPair {
            previous: buggy.clone(),
            current: fixed.clone(),
            author_date: e.author_date,
        };
        let tri = trisect_patch(&git, &pair, &GoAdapter).map_err(e2s("trisect"))?;
        ensure!(tri.source_patch == e.source_patch, "{}: diff between checkouts is not the stored source patch", e.id);
        ensure!(!tri.source_patch.is_empty(), "{}: empty source patch", e.id);
        ensure!(tri.test_patch.is_empty(), "{}: checkouts differ in tests", e.id);
        let expected_non_code = match e.variant(Mode::Buggy) {
            bugharvest_core::miner::TreeVariant::PreviousWithTestChanges => "",
            _ => e.non_code_patch.as_str(),
        };
        ensure!(tri.non_code_patch == expected_non_code, "{}: non-code difference is unexpected", e.id);
    }

    let id = &entries[0].id;
    for name in ["source.patch", "test.patch", "non_code.patch", ENTRY_FILE, ARCHIVE_FILE] {
        let path = store.join(id).join(name);
        let original = fs::read(&path).map_err(e2s(name))?;
        let mut tampered = original.clone();
        match tampered.first_mut() {
            Some(b) => *b ^= 0x01,
            None => tampered.push(b'x'),
        }
        fs::write(&path, &tampered).map_err(e2s(name))?;
        match load_benchmark(&store) {
            Err(StoreError::Corrupt { file, .. }) if file == name => {}
            other => return Err(format!("tampered {name} not detected: {:?}", other.map(|v| v.len()))),
        }
        ensure!(p.run_entry(id, Mode::Buggy).is_err(), "run accepted a tampered {name}");
        fs::write(&path, original).map_err(e2s(name))?;
    }
    ensure!(load_benchmark(&store).is_ok(), "store unreadable after restoring files");
    Ok("4 entries: checkout diffs equal stored source patches; 5/5 tamperings detected".into())
}

// ---- ledger and resume ----

/// Criterion 7a: the funnel balances with injected drops.
pub fn ledger_conservation() -> Check {
    let t = tmp()?;
    let corpus = synthetic_corpus(&t.path().join("corpus")).map_err(e2s("corpus"))?;
    let ids: Vec<String> = corpus.positives.iter().map(|p| entry_id(&p.repo, &p.current)).collect();
    let flaky = corpus.positives.iter().position(|p| p.failing_tests.iter().any(|t| t.name == "TestMul")).unwrap();
    let broken = corpus.positives.iter().position(|p| p.failing_tests.iter().any(|t| t.name == "TestX")).unwrap();

    let (backend, dynb) = sim();
    backend.inject(format!("verify:{}:fixed:2", ids[flaky]), Fault::FlipTest("TestMul".into()));
    backend.inject(format!("bundle:{}", ids[broken]), Fault::Fail("container engine lost the container".into()));
    let p = Pipeline::new(corpus_pipeline_config(t.path(), &corpus, "run", 4), dynb).map_err(e2s("pipeline"))?;
    let ledger = p.run_all().map_err(e2s("run"))?;

    ensure!(ledger.candidates() == 4, "{} candidates", ledger.candidates());
    let drops: u64 = ledger.dropped.values().sum();
    ensure!(
        ledger.candidates() == ledger.final_entries + drops + ledger.pending,
        "candidates {} != final {} + drops {drops} + pending {}",
        ledger.candidates(),
        ledger.final_entries,
        ledger.pending
    );
    ensure!(ledger.is_conserved() && ledger.pending == 0, "ledger reports itself unbalanced: {ledger:?}");
    ensure!(ledger.dropped.get("flaky") == Some(&1), "flaky drops: {:?}", ledger.dropped);
    ensure!(ledger.dropped.get("runner_failure") == Some(&1), "runner_failure drops: {:?}", ledger.dropped);

    let stored: BTreeSet<String> = load_benchmark(&p.config().store_dir).map_err(e2s("load"))?.into_iter().map(|e| e.id).collect();
    let expect: BTreeSet<String> = ids.iter().enumerate().filter(|(i, _)| *i != flaky && *i != broken).map(|(_, id)| id.clone()).collect();
    ensure!(stored == expect, "store holds {stored:?}, expected {expect:?}");
    ensure!(ledger.final_entries as usize == stored.len(), "final {} but store has {}", ledger.final_entries, stored.len());
    Ok(format!("4 candidates = {} final + 1 flaky + 1 runner_failure", ledger.final_entries))
}

/// Criterion 7b: every stage interrupted after its first item, with a torn
/// trailing record, resumes to a byte-identical store.
pub fn kill_and_resume() -> Check {
    let t = tmp()?;
    let corpus = synthetic_corpus(&t.path().join("corpus")).map_err(e2s("corpus"))?;
    let (reference, _) = run_corpus(t.path(), &corpus, "reference", 4)?;
    let want = file_tree(&reference.config().store_dir);
    ensure!(want.keys().filter(|k| k.ends_with(ENTRY_FILE)).count() == 4, "reference store incomplete");

    let config = corpus_pipeline_config(t.path(), &corpus, "resumed", 1);
    let stages = [
        (Stage::CollectRepos, REPOS_FILE),
        (Stage::CollectBugs, MINED_FILE),
        (Stage::Reproduce, BUNDLES_FILE),
        (Stage::Verify, VERIFY_FILE),
    ];
    for (stage, file) in stages {
        let (_, backend) = sim();
        let p = Pipeline::new(config.clone(), backend).map_err(e2s("pipeline"))?;
        let flag = p.cancel_flag();
        let p = p.with_item_hook(Arc::new(move |s, _| {
            if s == stage {
                flag.store(true, Ordering::SeqCst);
            }
        }));
        match p.run_stage(stage) {
            Err(PipelineError::Cancelled) => {}
            other => return Err(format!("{stage}: expected an interruption, got {other:?}")),
        }
        ensure!(!p.stage_completed(stage), "{stage} marked complete after interruption");
        let path = config.state_dir.join(file);
        let mut bytes = fs::read(&path).map_err(e2s(file))?;
        bytes.extend_from_slice(b"{\"id\":\"torn");
        fs::write(&path, bytes).map_err(e2s(file))?;

        let (_, backend) = sim();
        let resumed = Pipeline::new(config.clone(), backend).map_err(e2s("pipeline"))?;
        resumed.run_stage(stage).map_err(e2s(stage.name()))?;
    }
    let got = file_tree(&config.store_dir);
    ensure!(got == want, "resumed store differs: {:?} vs {:?}", got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    Ok(format!("4 stages interrupted and resumed; {} store files identical", got.len()))
}

// ---- real runner ----

/// Criterion 8: the pipeline under the real runner on a small Go project.
pub fn end_to_end_smoke() -> Optional {
    let backend = match ActBackend::new(ActConfig::default()) {
        Ok(b) => b,
        Err(e) => return Optional::Skipped(format!("container engine or act unavailable ({e})")),
    };
    Optional::Ran(real_runner_smoke(Arc::new(backend)))
}

fn real_runner_smoke(backend: Arc<dyn ContainerBackend>) -> Check {
    let started = Instant::now();
    let t = tmp()?;
    let dir = t.path().join("smoke");
    let b = RepoBuilder::init(&dir).map_err(e2s("init"))?;
    b.write("go.mod", "module example.com/smoke\n\ngo 1.21\n");
    b.write(".github/workflows/ci.yml", GO_WORKFLOW);
    b.write("calc.go", "package smoke\n\nfunc Add(a, b int) int { return a + b }\n");
    b.write(
        "calc_test.go",
        "package smoke\n\nimport \"testing\"\n\nfunc TestAdd(t *testing.T) {\n\tif got := Add(2, 3); got != 5 {\n\t\tt.Fatalf(\"Add(2, 3) = %d\", got)\n\t}\n}\n",
    );
    b.commit("initial", "2022-12-30T12:00:00Z").map_err(e2s("commit"))?;
    b.write("calc.go", "package smoke\n\nfunc Add(a, b int) int { return a - b }\n");
    b.commit("simplify", "2023-01-02T10:00:00Z").map_err(e2s("commit"))?;
    b.write("calc.go", "package smoke\n\nfunc Add(a, b int) int { return a + b }\n");
    b.commit("fix Add", "2023-01-03T10:00:00Z").map_err(e2s("commit"))?;

    let mut seed = synthetic_seed(&dir);
    seed.full_name = "smoke/calc".into();
    let config = PipelineConfig {
        workers: 1,
        state_dir: t.path().join("state"),
        store_dir: t.path().join("store"),
        cache_dir: t.path().join("cache"),
        seed_repos: vec![seed],
        offline_only: true,
        created_at: Some(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()),
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(config, backend).map_err(e2s("pipeline"))?;
    let ledger = p.run_all().map_err(e2s("run"))?;
    ensure!(ledger.final_entries == 1, "expected one entry, funnel {ledger:?}");
    let entries = load_benchmark(&p.config().store_dir).map_err(e2s("load"))?;
    let id = &entries[0].id;
    ensure!(p.run_entry(id, Mode::Buggy).map_err(e2s("buggy"))?.has_failures(), "buggy run passed");
    ensure!(p.run_entry(id, Mode::Fixed).map_err(e2s("fixed"))?.is_passing(), "fixed run failed");
    let verify_online: Vec<_> = p
        .runner()
        .audit()
        .into_iter()
        .filter(|e| matches!(e, AuditEvent::Created { label, network, .. } if label.starts_with("verify:") && *network != NetworkMode::Isolated))
        .collect();
    ensure!(verify_online.is_empty(), "verify ran with networking: {verify_online:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs() < 20 * 60, "took {elapsed:?}, limit 20 min");
    Ok(format!("one entry reproduced offline in {:.0} s", elapsed.as_secs_f64()))
}

fn synthetic_seed(dir: &Path) -> bugharvest_core::collector::RepositoryRecord {
    bugharvest_core::collector::RepositoryRecord {
        full_name: String::new(),
        clone_url: dir.display().to_string(),
        stars: 100,
        size_kb: 16,
        default_branch: "main".into(),
        language: Some("Go".into()),
        probe: None,
    }
}
