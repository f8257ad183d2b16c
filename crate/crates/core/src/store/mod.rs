//! Offline-reproducible benchmark entries: bundling, K-run verification,
//! hashed persistence and consumer-side checkout and execution.

mod verify;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, FixedOffset, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use verify::{flakiness_filter, Verdict, VerificationReport, VerificationRun};

use crate::adapters::{BuildAdapter, OutcomeKey, TestId, TestRun};
use crate::git::{Git, GitError};
use crate::miner::{instrument_tree, prepare_variant, BugFixCandidate, CommitPair, MinerError, PatchTriple, Pattern, TreeVariant, PATCH_FILES};
use crate::runner::{ExecutionRequest, ExecutionStatus, ImageRef, Runner, RunnerError, DEFAULT_TIMEOUT_SECS};
use crate::workflow::InstrumentOptions;

pub const SCHEMA_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.jsonl";
pub const ENTRY_FILE: &str = "entry.json";
pub const ARCHIVE_FILE: &str = "image.tar";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Git(#[from] GitError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error("entry {id}: {file} does not match its recorded hash")]
    Corrupt { id: String, file: String },
    #[error("entry {id}: unsupported schema version {version}")]
    Schema { id: String, version: u32 },
    #[error("duplicate entry id {0}")]
    Duplicate(String),
    #[error("entry {0} not found")]
    NotFound(String),
    #[error("entry {id}: {reason}")]
    Checkout { id: String, reason: String },
    #[error("entry {id} ({mode}) drifted from its expected outcomes: {}", diff.join("; "))]
    Drift { id: String, mode: Mode, diff: Vec<String> },
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct ReproducerConfig {
    /// Stability runs per variant.
    pub k: usize,
    pub offline_required: bool,
    /// Where bundles and their archives are written.
    pub image_store: PathBuf,
    /// Scratch checkouts.
    pub work_root: PathBuf,
    pub timeout: Duration,
    /// Fixed creation time for reproducible stores.
    pub created_at: Option<DateTime<Utc>>,
    pub instrument: InstrumentOptions,
}

impl ReproducerConfig {
    pub fn new(image_store: impl Into<PathBuf>, work_root: impl Into<PathBuf>) -> Self {
        Self {
            k: 5,
            offline_required: true,
            image_store: image_store.into(),
            work_root: work_root.into(),
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            created_at: None,
            instrument: InstrumentOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.k == 0 {
            return Err(StoreError::Config("K must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(StoreError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Buggy,
    Fixed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Buggy => "buggy",
            Mode::Fixed => "fixed",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "buggy" => Ok(Mode::Buggy),
            "fixed" => Ok(Mode::Fixed),
            other => Err(format!("unknown mode `{other}` (expected buggy or fixed)")),
        }
    }
}

/// An accepted, frozen bug-fix pair. Patch texts live in separate files and
/// are not part of `entry.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub schema_version: u32,
    pub id: String,
    pub repo: String,
    pub clone_url: String,
    pub previous_sha: String,
    pub current_sha: String,
    pub author_date: DateTime<FixedOffset>,
    pub pattern: Pattern,
    pub adapter: String,
    pub workflow_file: String,
    pub source_files: Vec<String>,
    pub test_files: Vec<String>,
    pub non_code_files: Vec<String>,
    #[serde(skip)]
    pub source_patch: String,
    #[serde(skip)]
    pub test_patch: String,
    #[serde(skip)]
    pub non_code_patch: String,
    pub failing_tests: Vec<TestId>,
    pub expected_buggy: Vec<OutcomeKey>,
    pub expected_fixed: Vec<OutcomeKey>,
    pub image: ImageRef,
    /// Archive path; relative to the entry directory once persisted.
    pub archive: String,
    pub runner_version: String,
    pub created_at: DateTime<Utc>,
}

impl BenchmarkEntry {
    pub fn pair(&self) -> CommitPair {
        CommitPair {
            previous: self.previous_sha.clone(),
            current: self.current_sha.clone(),
            author_date: self.author_date,
        }
    }

    pub fn triple(&self) -> PatchTriple {
        PatchTriple {
            source_patch: self.source_patch.clone(),
            test_patch: self.test_patch.clone(),
            non_code_patch: self.non_code_patch.clone(),
            source_files: self.source_files.clone(),
            test_files: self.test_files.clone(),
            non_code_files: self.non_code_files.clone(),
            notes: Vec::new(),
        }
    }

    fn patches(&self) -> [&str; 3] {
        [&self.source_patch, &self.test_patch, &self.non_code_patch]
    }

    pub fn expected(&self, mode: Mode) -> &[OutcomeKey] {
        match mode {
            Mode::Buggy => &self.expected_buggy,
            Mode::Fixed => &self.expected_fixed,
        }
    }

    /// The tree variant a mode checks out: buggy Pattern 1 keeps the test
    /// and non-code changes, buggy Pattern 2 is the unmodified previous tree.
    pub fn variant(&self, mode: Mode) -> TreeVariant {
        match (mode, self.pattern) {
            (Mode::Fixed, _) => TreeVariant::Current,
            (Mode::Buggy, Pattern::PassPassWithTests) => TreeVariant::PreviousWithTestChanges,
            (Mode::Buggy, Pattern::FailPassSourceOnly) => TreeVariant::Previous,
        }
    }
}

/// Where the history of an entry's repository can be cloned from.
#[derive(Debug, Clone)]
pub enum HistorySource<'a> {
    /// The entry's own `clone_url`.
    Remote,
    /// A local full clone.
    Mirror(&'a Path),
}

impl HistorySource<'_> {
    fn url(&self, entry_url: &str) -> String {
        match self {
            HistorySource::Remote => entry_url.to_string(),
            HistorySource::Mirror(p) => p.display().to_string(),
        }
    }
}

/// A checked-out version, owned by the caller.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    pub dir: PathBuf,
    /// Hash of the working tree as checked out (patches included).
    pub tree_hash: String,
}

/// Clones the entry's repository into `dest` (which must not exist or be
/// empty) and prepares the tree for `mode`.
pub fn checkout_version(
    entry: &BenchmarkEntry,
    mode: Mode,
    dest: &Path,
    history: &HistorySource<'_>,
) -> Result<PreparedTree, StoreError> {
    if dest.exists() && fs::read_dir(dest).map_err(io_err(dest))?.next().is_some() {
        return Err(StoreError::Checkout {
            id: entry.id.clone(),
            reason: format!("{} is not empty", dest.display()),
        });
    }
    let git = Git::clone_no_checkout(&history.url(&entry.clone_url), dest)?;
    if let Err(reason) = prepare_variant(&git, &entry.pair(), &entry.triple(), entry.variant(mode))? {
        return Err(StoreError::Checkout {
            id: entry.id.clone(),
            reason,
        });
    }
    Ok(PreparedTree {
        dir: dest.to_path_buf(),
        tree_hash: git.worktree_tree_hash()?,
    })
}

fn image_tag(id: &str) -> String {
    format!("bugharvest/{}:frozen", id.to_ascii_lowercase())
}

/// A draft with its archive, before verification.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub draft: BenchmarkEntry,
    pub archive: PathBuf,
}

#[derive(Debug, Clone)]
pub enum BundleOutcome {
    Built(Box<Bundle>),
    Dropped(String),
}

/// Runs the fixed version online once, snapshots the container and exports
/// it to `<image_store>/<id>.tar`.
#[allow(clippy::too_many_arguments)]
pub fn build_bundle(
    candidate: &BugFixCandidate,
    clone_url: &str,
    workflow_file: &str,
    mirror: &Path,
    runner: &Runner,
    adapter: &dyn BuildAdapter,
    config: &ReproducerConfig,
) -> Result<BundleOutcome, StoreError> {
    config.validate()?;
    let id = candidate.id();
    let archive = config.image_store.join(format!("{id}.tar"));
    if archive.exists() {
        return Err(StoreError::Duplicate(id));
    }
    let scratch = config.work_root.join(format!("bundle-{id}"));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
    }
    let result = (|| {
        let git = Git::clone_no_checkout(&mirror.display().to_string(), &scratch)?;
        git.checkout_clean(&candidate.pair.current)?;
        let workflow = match instrument_tree(&scratch, adapter, Some(workflow_file), &config.instrument) {
            Ok(w) => w,
            Err(reason) => return Ok(BundleOutcome::Dropped(format!("bundle_workflow: {reason}"))),
        };
        let req = ExecutionRequest::new(format!("bundle:{id}"), &candidate.repo, &scratch, &candidate.pair.current, workflow)
            .with_timeout(config.timeout);
        let mut res = runner.execute_commit(&req)?;
        let reason = match (res.status, &res.test_run) {
            (ExecutionStatus::Completed, Some(tr)) if tr.is_passing() => None,
            (ExecutionStatus::Completed, Some(_)) => Some("bundle_fixed_not_passing".to_string()),
            (ExecutionStatus::Completed, None) => Some("bundle_no_report".to_string()),
            (ExecutionStatus::Timeout, _) => Some("bundle_timeout".to_string()),
            (ExecutionStatus::RunnerFailure, _) => Some("bundle_runner_failure".to_string()),
        };
        if let Some(reason) = reason {
            runner.release(&mut res)?;
            return Ok(BundleOutcome::Dropped(reason));
        }
        let image = match runner.snapshot_environment(&mut res, &image_tag(&id)) {
            Ok(i) => i,
            Err(e) => {
                runner.release(&mut res)?;
                return Ok(BundleOutcome::Dropped(format!("snapshot_failed: {e}")));
            }
        };
        if let Err(e) = runner.export_image(&image, &archive) {
            let _ = fs::remove_file(&archive);
            return Ok(BundleOutcome::Dropped(format!("export_failed: {e}")));
        }
        let t = &candidate.triple;
        let draft = BenchmarkEntry {
            schema_version: SCHEMA_VERSION,
            id: id.clone(),
            repo: candidate.repo.clone(),
            clone_url: clone_url.to_string(),
            previous_sha: candidate.pair.previous.clone(),
            current_sha: candidate.pair.current.clone(),
            author_date: candidate.pair.author_date,
            pattern: candidate.pattern,
            adapter: adapter.id().to_string(),
            workflow_file: workflow_file.to_string(),
            source_files: t.source_files.clone(),
            test_files: t.test_files.clone(),
            non_code_files: t.non_code_files.clone(),
            source_patch: t.source_patch.clone(),
            test_patch: t.test_patch.clone(),
            non_code_patch: t.non_code_patch.clone(),
            failing_tests: candidate.failing_tests.clone(),
            expected_buggy: candidate.buggy_run.outcome_multiset(),
            expected_fixed: candidate.fixed_run.outcome_multiset(),
            image,
            archive: archive.display().to_string(),
            runner_version: runner.runner_version()?,
            created_at: config.created_at.unwrap_or_else(Utc::now),
        };
        Ok(BundleOutcome::Built(Box::new(Bundle {
            draft,
            archive: archive.clone(),
        })))
    })();
    let _ = fs::remove_dir_all(&scratch);
    result
}

/// Index line: one per entry, with the hash of every stored file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexLine {
    pub id: String,
    pub schema_version: u32,
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, StoreError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = std::io::Read::read(&mut f, &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_index(store: &Path) -> Result<Vec<IndexLine>, StoreError> {
    let path = store.join(INDEX_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| StoreError::Json {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Ids listed in the store index, without verifying anything.
pub fn stored_ids(store: &Path) -> Result<Vec<String>, StoreError> {
    Ok(read_index(store)?.into_iter().map(|l| l.id).collect())
}

/// Writes the entry, its patches and its archive under `<store>/<id>/` and
/// records their hashes in the index. Returns the entry as stored.
pub fn persist_entry(entry: &BenchmarkEntry, store: &Path) -> Result<BenchmarkEntry, StoreError> {
    let dir = store.join(&entry.id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut stored = entry.clone();
    let src = PathBuf::from(&entry.archive);
    let src = if src.is_relative() { dir.join(src) } else { src };
    let dest = dir.join(ARCHIVE_FILE);
    if src != dest {
        fs::copy(&src, &dest).map_err(io_err(&src))?;
    }
    stored.archive = ARCHIVE_FILE.to_string();

    let mut files = BTreeMap::new();
    for (name, body) in PATCH_FILES.iter().zip(stored.patches()) {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        files.insert(name.to_string(), hex::encode(Sha256::digest(body.as_bytes())));
    }
    let mut json = serde_json::to_vec_pretty(&stored).expect("entry serializes");
    json.push(b'\n');
    write_atomic(&dir.join(ENTRY_FILE), &json)?;
    files.insert(ENTRY_FILE.to_string(), hex::encode(Sha256::digest(&json)));
    files.insert(ARCHIVE_FILE.to_string(), sha256_file(&dest)?);

    let mut index: BTreeMap<String, IndexLine> =
        read_index(store)?.into_iter().map(|l| (l.id.clone(), l)).collect();
    index.insert(
        stored.id.clone(),
        IndexLine {
            id: stored.id.clone(),
            schema_version: SCHEMA_VERSION,
            files,
        },
    );
    let mut out = String::new();
    for line in index.values() {
        out += &serde_json::to_string(line).expect("index line serializes");
        out.push('\n');
    }
    write_atomic(&store.join(INDEX_FILE), out.as_bytes())?;
    Ok(stored)
}

fn load_one(store: &Path, line: &IndexLine) -> Result<BenchmarkEntry, StoreError> {
    if line.schema_version > SCHEMA_VERSION {
        return Err(StoreError::Schema {
            id: line.id.clone(),
            version: line.schema_version,
        });
    }
    let dir = store.join(&line.id);
    let required = PATCH_FILES.iter().copied().chain([ENTRY_FILE, ARCHIVE_FILE]);
    for name in required {
        let corrupt = || StoreError::Corrupt {
            id: line.id.clone(),
            file: name.to_string(),
        };
        let recorded = line.files.get(name).ok_or_else(corrupt)?;
        let path = dir.join(name);
        if !path.is_file() || &sha256_file(&path)? != recorded {
            return Err(corrupt());
        }
    }
    let entry_path = dir.join(ENTRY_FILE);
    let bytes = fs::read(&entry_path).map_err(io_err(&entry_path))?;
    let mut entry: BenchmarkEntry = serde_json::from_slice(&bytes).map_err(|e| StoreError::Json {
        path: entry_path.clone(),
        message: e.to_string(),
    })?;
    if entry.id != line.id {
        return Err(StoreError::Corrupt {
            id: line.id.clone(),
            file: ENTRY_FILE.into(),
        });
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    };
    entry.source_patch = read(PATCH_FILES[0])?;
    entry.test_patch = read(PATCH_FILES[1])?;
    entry.non_code_patch = read(PATCH_FILES[2])?;
    Ok(entry)
}

/// Loads every indexed entry, verifying all recorded hashes.
pub fn load_benchmark(store: &Path) -> Result<Vec<BenchmarkEntry>, StoreError> {
    read_index(store)?.iter().map(|l| load_one(store, l)).collect()
}

pub fn load_entry(store: &Path, id: &str) -> Result<BenchmarkEntry, StoreError> {
    let index = read_index(store)?;
    let line = index
        .iter()
        .find(|l| l.id == id)
        .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
    load_one(store, line)
}

/// Absolute archive path of a persisted or draft entry.
pub fn archive_path(entry: &BenchmarkEntry, store: &Path) -> PathBuf {
    let p = PathBuf::from(&entry.archive);
    if p.is_relative() {
        store.join(&entry.id).join(p)
    } else {
        p
    }
}

/// Ensures the entry's image is known to the engine, importing the archive
/// if needed.
pub fn ensure_image(entry: &BenchmarkEntry, store: &Path, runner: &Runner) -> Result<ImageRef, StoreError> {
    if runner.backend().image_exists(&entry.image) {
        return Ok(entry.image.clone());
    }
    let image = runner.import_image(&archive_path(entry, store))?;
    if image.digest != entry.image.digest {
        return Err(StoreError::Corrupt {
            id: entry.id.clone(),
            file: ARCHIVE_FILE.into(),
        });
    }
    Ok(image)
}

/// One offline execution of a prepared tree.
pub(crate) fn run_offline(
    entry: &BenchmarkEntry,
    tree: &Path,
    image: &ImageRef,
    label: String,
    runner: &Runner,
    adapter: &dyn BuildAdapter,
    config: &ReproducerConfig,
) -> Result<(ExecutionStatus, Option<TestRun>, Option<String>), StoreError> {
    let workflow = match instrument_tree(tree, adapter, Some(&entry.workflow_file), &config.instrument) {
        Ok(w) => w,
        Err(reason) => return Ok((ExecutionStatus::RunnerFailure, None, Some(reason))),
    };
    let req = ExecutionRequest::new(label, &entry.repo, tree, &entry.current_sha, workflow)
        .offline(image.clone())
        .with_timeout(config.timeout);
    let mut res = runner.execute_offline(&req)?;
    runner.release(&mut res)?;
    let note = res.failure_reason.or(res.report_error);
    Ok((res.status, res.test_run, note))
}

/// Differences between two outcome multisets, as `-expected` / `+actual`.
pub fn outcome_diff(expected: &[OutcomeKey], actual: &[OutcomeKey]) -> Vec<String> {
    let mut diff = Vec::new();
    for e in expected {
        if !actual.contains(e) {
            diff.push(format!("-{}::{} {}", e.0, e.1, e.2));
        }
    }
    for a in actual {
        if !expected.contains(a) {
            diff.push(format!("+{}::{} {}", a.0, a.1, a.2));
        }
    }
    diff
}

/// Checks out `mode` into a scratch directory, runs it offline from the
/// frozen image, and compares the outcome multiset with the expectation.
pub fn run_entry(
    entry: &BenchmarkEntry,
    mode: Mode,
    store: &Path,
    history: &HistorySource<'_>,
    runner: &Runner,
    adapter: &dyn BuildAdapter,
    config: &ReproducerConfig,
) -> Result<TestRun, StoreError> {
    let image = ensure_image(entry, store, runner)?;
    let scratch = config.work_root.join(format!("run-{}-{mode}", entry.id));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
    }
    let result = (|| {
        let tree = checkout_version(entry, mode, &scratch, history)?;
        let label = format!("run:{}:{mode}", entry.id);
        let (status, run, note) = run_offline(entry, &tree.dir, &image, label, runner, adapter, config)?;
        let Some(run) = run.filter(|_| status == ExecutionStatus::Completed) else {
            return Err(StoreError::Drift {
                id: entry.id.clone(),
                mode,
                diff: vec![format!("run {status:?}: {}", note.unwrap_or_default())],
            });
        };
        let diff = outcome_diff(entry.expected(mode), &run.outcome_multiset());
        if !diff.is_empty() {
            return Err(StoreError::Drift {
                id: entry.id.clone(),
                mode,
                diff,
            });
        }
        Ok(run)
    })();
    let _ = fs::remove_dir_all(&scratch);
    result
}
