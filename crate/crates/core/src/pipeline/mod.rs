//! Stage driver: collect-repos → collect-bugs → reproduce → verify, plus
//! stats. Every stage reads the previous stage's files under the state
//! directory, skips work already recorded, and appends one line per
//! finished item, so an interrupted stage resumes where it stopped.

mod config;
mod ledger;
mod state;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub use config::PipelineConfig;
pub use ledger::{drop_key, emit_report, AtomicLedger, ReportFormat, StageLedger, CORE_DROP_REASONS};
pub use state::{
    read_jsonl, rewrite_jsonl, BundleRecord, JsonlWriter, MinedRepo, PairRecord, PairVerdict, SkipRecord,
    VerifyRecord,
};

use crate::adapters::{AdapterRegistry, BuildAdapter, RegistryError, TestRun};
use crate::collector::{
    evaluate_criteria, probe_repository, Auth, HttpResponse, ProbeConfig, RepoProbeResult, RepositoryRecord,
    ReqwestTransport, SearchClient, SearchError, Transport,
};
use crate::git::{Git, GitError};
use crate::miner::{
    enumerate_pairs, match_patterns, trisect_patch, BugFixCandidate, CandidateRecord, DateWindow, MatchOutcome,
    MinerError, WorktreeExecutor, WorktreeExecutorConfig, PATCH_FILES,
};
use crate::runner::{ContainerBackend, Runner, RunnerError};
use crate::store::{
    build_bundle, checkout_version, flakiness_filter, load_entry, persist_entry, run_entry, BenchmarkEntry,
    BundleOutcome, HistorySource, Mode, PreparedTree, ReproducerConfig, StoreError, Verdict,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} needs the output of {required}: run {required} first")]
    Dependency { stage: Stage, required: Stage },
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("pipeline state: {0}")]
    State(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Git(#[from] GitError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("stage interrupted; re-run it to resume")]
    Cancelled,
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    CollectRepos,
    CollectBugs,
    Reproduce,
    Verify,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::CollectRepos,
        Stage::CollectBugs,
        Stage::Reproduce,
        Stage::Verify,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::CollectRepos => "collect-repos",
            Stage::CollectBugs => "collect-bugs",
            Stage::Reproduce => "reproduce",
            Stage::Verify => "verify",
            Stage::Stats => "stats",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::CollectRepos | Stage::Stats => None,
            Stage::CollectBugs => Some(Stage::CollectRepos),
            Stage::Reproduce => Some(Stage::CollectBugs),
            Stage::Verify => Some(Stage::Reproduce),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub const REPOS_FILE: &str = "repos.jsonl";
pub const MINED_FILE: &str = "mined.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const BUNDLES_FILE: &str = "bundles.jsonl";
pub const VERIFY_FILE: &str = "verification.jsonl";
pub const SKIPS_FILE: &str = "skips.jsonl";

/// Called after each finished work item with the stage and the item's id.
pub type ItemHook = Arc<dyn Fn(Stage, &str) + Send + Sync>;

struct OfflineTransport;

impl Transport for OfflineTransport {
    fn get(&self, url: &str, _: &[(String, String)]) -> Result<HttpResponse, SearchError> {
        Err(SearchError::Network(format!("offline-only mode: refusing to fetch {url}")))
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    runner: Runner,
    registry: AdapterRegistry,
    cancel: Arc<AtomicBool>,
    transport: Option<Arc<dyn Transport>>,
    hook: Option<ItemHook>,
    store_writer: Mutex<()>,
}

impl Pipeline {
    /// Relative state, store and cache paths are resolved against the
    /// current directory.
    pub fn new(mut config: PipelineConfig, backend: Arc<dyn ContainerBackend>) -> Result<Self, PipelineError> {
        config.validate()?;
        for p in [&mut config.state_dir, &mut config.store_dir, &mut config.cache_dir] {
            *p = std::path::absolute(&*p).map_err(|e| PipelineError::io(p, e))?;
        }
        let registry = AdapterRegistry::with_builtin();
        if let Some(id) = &config.adapter {
            registry.get(id)?;
        }
        let runner = Runner::new(backend, config.state_dir.join("logs"), config.workers);
        Ok(Self {
            config,
            runner,
            registry,
            cancel: Arc::new(AtomicBool::new(false)),
            transport: None,
            hook: None,
            store_writer: Mutex::new(()),
        })
    }

    /// Replaces the HTTP transport used for search.
    pub fn with_transport(mut self, t: Arc<dyn Transport>) -> Self {
        self.transport = Some(t);
        self
    }

    pub fn with_item_hook(mut self, hook: ItemHook) -> Self {
        self.hook = Some(hook);
        self
    }

    /// Setting the flag stops workers after their current item.
    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn runner(&self) -> &Runner {
        &self.runner
    }

    fn state(&self, name: &str) -> PathBuf {
        self.config.state_dir.join(name)
    }

    fn done_marker(&self, stage: Stage) -> PathBuf {
        self.state(&format!("{}.done", stage.name()))
    }

    pub fn stage_completed(&self, stage: Stage) -> bool {
        self.done_marker(stage).is_file()
    }

    fn mark_done(&self, stage: Stage) -> Result<(), PipelineError> {
        state::write_atomic(&self.done_marker(stage), b"")
    }

    fn mirror_dir(&self, repo: &str) -> PathBuf {
        self.state("mirrors").join(repo.replace('/', "__"))
    }

    fn candidate_dir(&self, id: &str) -> PathBuf {
        self.state("candidates").join(id)
    }

    fn reproducer_config(&self) -> ReproducerConfig {
        let mut c = ReproducerConfig::new(self.state("images"), self.state("work"));
        c.k = self.config.k;
        c.timeout = Duration::from_secs(self.config.timeout_secs);
        c.created_at = self.config.resolved_created_at();
        c
    }

    fn adapter(&self, id: &str) -> Result<&dyn BuildAdapter, PipelineError> {
        Ok(self.registry.get(id)?)
    }

    /// Runs one stage. The returned ledger counts only what this invocation
    /// added, except for `stats`, which reports the whole funnel.
    pub fn run_stage(&self, stage: Stage) -> Result<StageLedger, PipelineError> {
        if let Some(required) = stage.prerequisite() {
            if !self.stage_completed(required) {
                return Err(PipelineError::Dependency { stage, required });
            }
        }
        self.cancel.store(false, Ordering::SeqCst);
        for dir in [self.state("images"), self.state("work")] {
            fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        let delta = AtomicLedger::default();
        match stage {
            Stage::CollectRepos => self.collect_repos(&delta)?,
            Stage::CollectBugs => self.collect_bugs(&delta)?,
            Stage::Reproduce => self.reproduce(&delta)?,
            Stage::Verify => self.verify(&delta)?,
            Stage::Stats => return self.ledger(),
        }
        self.write_skips()?;
        self.mark_done(stage)?;
        Ok(delta.snapshot())
    }

    /// Runs every stage in order and returns the final funnel.
    pub fn run_all(&self) -> Result<StageLedger, PipelineError> {
        for stage in &Stage::ALL[..4] {
            self.run_stage(*stage)?;
        }
        self.ledger()
    }

    fn parallel<T, F>(&self, stage: Stage, items: Vec<(String, T)>, work: F) -> Result<(), PipelineError>
    where
        T: Send,
        F: Fn(&str, T) -> Result<(), PipelineError> + Sync,
    {
        if items.is_empty() {
            return Ok(());
        }
        let (tx, rx) = crossbeam_channel::unbounded();
        for item in items {
            tx.send(item).expect("receiver alive");
        }
        drop(tx);
        let failure: Mutex<Option<PipelineError>> = Mutex::new(None);
        let abort = AtomicBool::new(false);
        let workers = self.config.workers.min(rx.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| {
                    while let Ok((subject, item)) = rx.recv() {
                        if self.cancel.load(Ordering::SeqCst) || abort.load(Ordering::SeqCst) {
                            break;
                        }
                        match work(&subject, item) {
                            Ok(()) => {
                                if let Some(h) = &self.hook {
                                    h(stage, &subject);
                                }
                            }
                            Err(e) => {
                                tracing::error!(%stage, %subject, "{e}");
                                abort.store(true, Ordering::SeqCst);
                                failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
            return Err(e);
        }
        if self.cancel.load(Ordering::SeqCst) {
            return Err(PipelineError::Cancelled);
        }
        Ok(())
    }

    fn discover(&self) -> Result<Vec<RepositoryRecord>, PipelineError> {
        if !self.config.seed_repos.is_empty() {
            return Ok(self.config.seed_repos.clone());
        }
        let transport: Box<dyn Transport> = match (&self.transport, self.config.offline_only) {
            (_, true) => Box::new(OfflineTransport),
            (Some(t), false) => Box::new(Shared(t.clone())),
            (None, false) => Box::new(ReqwestTransport::new(Duration::from_secs(60))?),
        };
        let auth = if self.config.anonymous {
            Auth::Anonymous
        } else {
            Auth::from_env().ok_or_else(|| {
                PipelineError::Config(format!(
                    "set {} or enable anonymous search (anonymous = true)",
                    Auth::TOKEN_VAR
                ))
            })?
        };
        let client = SearchClient::new(transport, auth)
            .with_base_url(&self.config.api_url)
            .with_cache(&self.config.cache_dir);
        Ok(client.search_repositories(&self.config.criteria, self.config.page_limit)?)
    }

    fn probe_adapters(&self, record: &RepositoryRecord) -> Result<Vec<&dyn BuildAdapter>, RegistryError> {
        let lang = record.language.as_deref().unwrap_or(&self.config.criteria.language);
        self.registry.select(lang, self.config.adapter.as_deref())
    }

    fn collect_repos(&self, delta: &AtomicLedger) -> Result<(), PipelineError> {
        let path = self.state(REPOS_FILE);
        let known: HashSet<String> = read_jsonl::<RepositoryRecord>(&path)?
            .into_iter()
            .map(|r| r.full_name)
            .collect();
        let found = self.discover()?;
        let writer = JsonlWriter::open(&path)?;
        let mut todo = Vec::new();
        let mut queued = HashSet::new();
        for r in found {
            if known.contains(&r.full_name) || !queued.insert(r.full_name.clone()) {
                continue;
            }
            delta.repo_found();
            if !evaluate_criteria(&r, &self.config.criteria) {
                writer.append(&r)?;
                continue;
            }
            todo.push((r.full_name.clone(), r));
        }
        let probe_config = ProbeConfig {
            timeout: Duration::from_secs(self.config.timeout_secs),
            allow_multiple_workflows: self.config.allow_multiple_workflows,
            ..ProbeConfig::default()
        };
        self.parallel(Stage::CollectRepos, todo, |name, mut record| {
            let workdir = self.state("work").join(format!("probe-{}", name.replace('/', "__")));
            let probe = match self.probe_adapters(&record) {
                Ok(adapters) => probe_repository(&record, &workdir, &self.runner, &adapters, &probe_config),
                Err(e) => RepoProbeResult {
                    test_workflow_count: 0,
                    executed: false,
                    report_retrieved: false,
                    head_test_run: None,
                    head_sha: None,
                    adapter: None,
                    workflow_file: None,
                    note: Some(e.to_string()),
                },
            };
            delta.repo_probed(probe.report_retrieved);
            record.probe = Some(probe);
            writer.append(&record)
        })
    }

    fn retained_repos(&self) -> Result<Vec<RepositoryRecord>, PipelineError> {
        let mut repos: Vec<RepositoryRecord> = read_jsonl::<RepositoryRecord>(&self.state(REPOS_FILE))?
            .into_iter()
            .filter(RepositoryRecord::retained)
            .collect();
        repos.sort_by(|a, b| a.full_name.cmp(&b.full_name));
        repos.dedup_by(|a, b| a.full_name == b.full_name);
        Ok(repos)
    }

    fn collect_bugs(&self, delta: &AtomicLedger) -> Result<(), PipelineError> {
        let path = self.state(MINED_FILE);
        let done: HashSet<String> = read_jsonl::<MinedRepo>(&path)?.into_iter().map(|m| m.repo).collect();
        let todo: Vec<_> = self
            .retained_repos()?
            .into_iter()
            .filter(|r| !done.contains(&r.full_name))
            .map(|r| (r.full_name.clone(), r))
            .collect();
        let writer = JsonlWriter::open(&path)?;
        self.parallel(Stage::CollectBugs, todo, |_, record| {
            let mined = self.mine_repo(&record)?;
            delta.pairs(mined.pairs.len() as u64);
            for p in &mined.pairs {
                if let Some(pattern) = p.pattern {
                    delta.candidate(pattern);
                }
            }
            writer.append(&mined)
        })?;
        self.write_candidate_index()
    }

    fn ensure_mirror(&self, record: &RepositoryRecord) -> Result<Git, PipelineError> {
        let dir = self.mirror_dir(&record.full_name);
        if dir.join(".git").exists() {
            return Ok(Git::open(dir));
        }
        let partial = dir.with_extension("partial");
        for d in [&dir, &partial] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| PipelineError::io(d, e))?;
            }
        }
        Git::clone_full(&record.clone_url, &partial)?;
        fs::rename(&partial, &dir).map_err(|e| PipelineError::io(&dir, e))?;
        Ok(Git::open(dir))
    }

    fn mine_repo(&self, record: &RepositoryRecord) -> Result<MinedRepo, PipelineError> {
        let name = &record.full_name;
        let failed = |e: String| MinedRepo {
            repo: name.clone(),
            pairs: Vec::new(),
            error: Some(e),
        };
        let probe = record.probe.as_ref().expect("retained repos are probed");
        let adapter_id = probe.adapter.as_deref().unwrap_or_default();
        let adapter = self.adapter(adapter_id)?;
        let git = match self.ensure_mirror(record) {
            Ok(g) => g,
            Err(e) => return Ok(failed(format!("mirror_failed: {e}"))),
        };
        let window = DateWindow::new(self.config.window_start, self.config.window_end)?;
        let pairs = match enumerate_pairs(&git, "HEAD", &window) {
            Ok(p) => p,
            Err(e) => return Ok(failed(format!("history_failed: {e}"))),
        };
        let scratch = self.state("work").join(format!("mine-{}", name.replace('/', "__")));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| PipelineError::io(&scratch, e))?;
        }
        git.run(["worktree", "prune"])?;
        let mut exec = WorktreeExecutor::new(
            name,
            Git::open(git.dir()),
            &scratch,
            &self.runner,
            adapter,
            WorktreeExecutorConfig {
                timeout: Duration::from_secs(self.config.timeout_secs),
                preferred_workflow: probe.workflow_file.clone(),
                ..WorktreeExecutorConfig::default()
            },
        )?;
        let mut records = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            if self.cancel.load(Ordering::SeqCst) {
                return Err(PipelineError::Cancelled);
            }
            // only a malformed diff is specific to the pair; anything else is infrastructure
            let outcome = match trisect_patch(&git, pair, adapter) {
                Ok(triple) => match match_patterns(name, pair, &triple, &mut exec) {
                    Ok(o) => o,
                    Err(MinerError::Diff(e)) => MatchOutcome::Skipped(format!("malformed_diff: {e}")),
                    Err(e) => return Err(e.into()),
                },
                Err(MinerError::Diff(e)) => MatchOutcome::Skipped(format!("trisect_failed: {e}")),
                Err(e) => return Err(e.into()),
            };
            if let MatchOutcome::Candidate(c) = &outcome {
                self.write_candidate(c)?;
            }
            records.push(PairRecord::from_outcome(&pair.previous, &pair.current, &outcome));
        }
        Ok(MinedRepo {
            repo: name.clone(),
            pairs: records,
            error: None,
        })
    }

    fn write_candidate(&self, c: &BugFixCandidate) -> Result<(), PipelineError> {
        let dir = self.candidate_dir(&c.id());
        let t = &c.triple;
        for (name, body) in PATCH_FILES.iter().zip([&t.source_patch, &t.test_patch, &t.non_code_patch]) {
            state::write_atomic(&dir.join(name), body.as_bytes())?;
        }
        let json = serde_json::to_vec_pretty(c).expect("candidate serializes");
        state::write_atomic(&dir.join("candidate.json"), &json)
    }

    fn read_candidate(&self, id: &str) -> Result<BugFixCandidate, PipelineError> {
        let p = self.candidate_dir(id).join("candidate.json");
        let bytes = fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::State(format!("{}: {e}", p.display())))
    }

    /// Candidate ids in mining order, with their repository.
    fn candidate_ids(&self) -> Result<Vec<(String, String)>, PipelineError> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for m in read_jsonl::<MinedRepo>(&self.state(MINED_FILE))? {
            for p in m.pairs.iter().filter(|p| p.verdict == PairVerdict::Candidate) {
                let id = crate::miner::entry_id(&m.repo, &p.current);
                if seen.insert(id.clone()) {
                    out.push((id, m.repo.clone()));
                }
            }
        }
        Ok(out)
    }

    fn write_candidate_index(&self) -> Result<(), PipelineError> {
        let mut lines = Vec::new();
        for (id, _) in self.candidate_ids()? {
            lines.push(CandidateRecord::new(&self.read_candidate(&id)?));
        }
        lines.sort_by(|a, b| a.id.cmp(&b.id));
        rewrite_jsonl(&self.state(CANDIDATES_FILE), &lines)
    }

    fn repo_index(&self) -> Result<BTreeMap<String, RepositoryRecord>, PipelineError> {
        Ok(self
            .retained_repos()?
            .into_iter()
            .map(|r| (r.full_name.clone(), r))
            .collect())
    }

    fn reproduce(&self, delta: &AtomicLedger) -> Result<(), PipelineError> {
        let path = self.state(BUNDLES_FILE);
        let done: HashSet<String> = read_jsonl::<BundleRecord>(&path)?.into_iter().map(|b| b.id).collect();
        let repos = self.repo_index()?;
        let todo: Vec<_> = self
            .candidate_ids()?
            .into_iter()
            .filter(|(id, _)| !done.contains(id))
            .collect();
        let writer = JsonlWriter::open(&path)?;
        let rcfg = self.reproducer_config();
        self.parallel(Stage::Reproduce, todo, |id, repo| {
            let record = repos
                .get(&repo)
                .ok_or_else(|| PipelineError::State(format!("candidate {id} names unknown repository {repo}")))?;
            let probe = record.probe.as_ref().expect("retained repos are probed");
            let candidate = self.read_candidate(id)?;
            let stale = rcfg.image_store.join(format!("{id}.tar"));
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| PipelineError::io(&stale, e))?;
            }
            let outcome = build_bundle(
                &candidate,
                &record.clone_url,
                probe.workflow_file.as_deref().unwrap_or_default(),
                &self.mirror_dir(&repo),
                &self.runner,
                self.adapter(probe.adapter.as_deref().unwrap_or_default())?,
                &rcfg,
            )?;
            let rec = match outcome {
                BundleOutcome::Built(b) => BundleRecord {
                    id: id.to_string(),
                    dropped: None,
                    draft: Some(b.draft),
                },
                BundleOutcome::Dropped(reason) => {
                    delta.dropped(&reason);
                    BundleRecord {
                        id: id.to_string(),
                        dropped: Some(reason),
                        draft: None,
                    }
                }
            };
            writer.append(&rec)
        })
    }

    fn verify(&self, delta: &AtomicLedger) -> Result<(), PipelineError> {
        let path = self.state(VERIFY_FILE);
        let done: HashSet<String> = read_jsonl::<VerifyRecord>(&path)?.into_iter().map(|v| v.id).collect();
        let mut seen = HashSet::new();
        let todo: Vec<_> = read_jsonl::<BundleRecord>(&self.state(BUNDLES_FILE))?
            .into_iter()
            .filter(|b| !done.contains(&b.id) && seen.insert(b.id.clone()))
            .filter_map(|b| Some((b.id, b.draft?)))
            .collect();
        let writer = JsonlWriter::open(&path)?;
        let rcfg = self.reproducer_config();
        self.parallel(Stage::Verify, todo, |id, mut draft| {
            let candidate = self.read_candidate(id)?;
            draft.source_patch = candidate.triple.source_patch;
            draft.test_patch = candidate.triple.test_patch;
            draft.non_code_patch = candidate.triple.non_code_patch;
            let adapter = self.adapter(&draft.adapter)?;
            let report = flakiness_filter(&draft, &self.mirror_dir(&draft.repo), &self.runner, adapter, &rcfg)?;
            match report.finalize(&draft) {
                Some(entry) => {
                    let _guard = self.store_writer.lock().unwrap_or_else(|p| p.into_inner());
                    persist_entry(&entry, &self.config.store_dir)?;
                    delta.finalized();
                }
                None => delta.dropped(verdict_key(report.verdict)),
            }
            writer.append(&VerifyRecord {
                id: id.to_string(),
                report,
            })
        })
    }

    /// The whole funnel, recomputed from the state files.
    pub fn ledger(&self) -> Result<StageLedger, PipelineError> {
        let mut l = StageLedger::default();
        let mut repos = BTreeMap::new();
        for r in read_jsonl::<RepositoryRecord>(&self.state(REPOS_FILE))? {
            repos.insert(r.full_name.clone(), r);
        }
        for r in repos.values() {
            l.repos_found += 1;
            if r.probe.is_some() {
                l.repos_probed += 1;
            }
            if r.retained() {
                l.repos_retained += 1;
            }
        }
        let mut mined = BTreeMap::new();
        for m in read_jsonl::<MinedRepo>(&self.state(MINED_FILE))? {
            mined.insert(m.repo.clone(), m);
        }
        let mut patterns = BTreeMap::new();
        for m in mined.values() {
            l.pairs_examined += m.pairs.len() as u64;
            for p in &m.pairs {
                if let Some(pat) = p.pattern {
                    patterns.insert(crate::miner::entry_id(&m.repo, &p.current), pat);
                }
            }
        }
        let bundles: BTreeMap<String, BundleRecord> = read_jsonl::<BundleRecord>(&self.state(BUNDLES_FILE))?
            .into_iter()
            .map(|b| (b.id.clone(), b))
            .collect();
        let verified: BTreeMap<String, Verdict> = read_jsonl::<VerifyRecord>(&self.state(VERIFY_FILE))?
            .into_iter()
            .map(|v| (v.id, v.report.verdict))
            .collect();
        for (id, pattern) in &patterns {
            l.add_candidate(*pattern);
            match (bundles.get(id), verified.get(id)) {
                (Some(BundleRecord { dropped: Some(r), .. }), _) => l.drop_reason(r),
                (Some(_), Some(Verdict::Stable)) => l.final_entries += 1,
                (Some(_), Some(v)) => l.drop_reason(verdict_key(*v)),
                _ => l.pending += 1,
            }
        }
        Ok(l)
    }

    fn write_skips(&self) -> Result<(), PipelineError> {
        let mut skips = BTreeSet::new();
        let mut push = |stage: Stage, subject: &str, reason: &str| {
            skips.insert(SkipRecord {
                stage: stage.name().into(),
                subject: subject.into(),
                reason: reason.into(),
            });
        };
        for r in read_jsonl::<RepositoryRecord>(&self.state(REPOS_FILE))? {
            match &r.probe {
                None => push(Stage::CollectRepos, &r.full_name, "criteria_not_met"),
                Some(p) if !p.report_retrieved => {
                    let why = p.note.as_deref().unwrap_or("no_report");
                    let key = if !p.executed { "not_executed" } else { "no_report" };
                    push(Stage::CollectRepos, &r.full_name, &format!("{key}: {why}"));
                }
                _ => {}
            }
        }
        for m in read_jsonl::<MinedRepo>(&self.state(MINED_FILE))? {
            if let Some(e) = &m.error {
                push(Stage::CollectBugs, &m.repo, e);
            }
            for p in m.pairs.iter().filter(|p| p.verdict != PairVerdict::Candidate) {
                let subject = format!("{}@{}", m.repo, p.current);
                push(Stage::CollectBugs, &subject, p.reason.as_deref().unwrap_or_default());
            }
        }
        for b in read_jsonl::<BundleRecord>(&self.state(BUNDLES_FILE))? {
            if let Some(r) = &b.dropped {
                push(Stage::Reproduce, &b.id, r);
            }
        }
        for v in read_jsonl::<VerifyRecord>(&self.state(VERIFY_FILE))? {
            if v.report.verdict != Verdict::Stable {
                let reason = format!(
                    "{}: {}",
                    verdict_key(v.report.verdict),
                    v.report.reason.as_deref().unwrap_or_default()
                );
                push(Stage::Verify, &v.id, &reason);
            }
        }
        let skips: Vec<_> = skips.into_iter().collect();
        rewrite_jsonl(&self.state(SKIPS_FILE), &skips)
    }

    fn history(&self, entry: &BenchmarkEntry) -> PathBuf {
        self.mirror_dir(&entry.repo)
    }

    /// Checks out one version of a stored entry into `dest`.
    pub fn checkout(&self, id: &str, mode: Mode, dest: &Path) -> Result<PreparedTree, PipelineError> {
        let entry = load_entry(&self.config.store_dir, id)?;
        let mirror = self.history(&entry);
        let source = if mirror.join(".git").exists() {
            HistorySource::Mirror(&mirror)
        } else {
            HistorySource::Remote
        };
        Ok(checkout_version(&entry, mode, dest, &source)?)
    }

    /// Runs one version of a stored entry offline and checks its outcomes.
    pub fn run_entry(&self, id: &str, mode: Mode) -> Result<TestRun, PipelineError> {
        let entry = load_entry(&self.config.store_dir, id)?;
        let mirror = self.history(&entry);
        let source = if mirror.join(".git").exists() {
            HistorySource::Mirror(&mirror)
        } else {
            HistorySource::Remote
        };
        let adapter = self.adapter(&entry.adapter)?;
        Ok(run_entry(
            &entry,
            mode,
            &self.config.store_dir,
            &source,
            &self.runner,
            adapter,
            &self.reproducer_config(),
        )?)
    }
}

fn verdict_key(v: Verdict) -> &'static str {
    match v {
        Verdict::Stable => "stable",
        Verdict::Flaky => "flaky",
        Verdict::OfflineFailure => "offline_failure",
    }
}

struct Shared(Arc<dyn Transport>);

impl Transport for Shared {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, SearchError> {
        self.0.get(url, headers)
    }
}
