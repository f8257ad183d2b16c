use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use super::*;
use crate::adapters::{AdapterRegistry, GoAdapter};
use crate::fixture::{go_skeleton, RepoBuilder, GO_WORKFLOW};
use crate::runner::{Fault, SimulatedBackend};

fn record(name: &str, stars: u64, size_kb: u64, lang: &str) -> RepositoryRecord {
    RepositoryRecord {
        full_name: name.into(),
        clone_url: format!("https://example.com/{name}.git"),
        stars,
        size_kb,
        default_branch: "main".into(),
        language: Some(lang.into()),
        probe: None,
    }
}

#[test]
fn criteria_boundaries() {
    let c = SelectionCriteria::default();
    assert!(evaluate_criteria(&record("a/b", 50, 10, "Go"), &c));
    assert!(!evaluate_criteria(&record("a/b", 49, 10, "Go"), &c));
    assert!(evaluate_criteria(&record("a/b", 50, 204_800, "go"), &c));
    assert!(!evaluate_criteria(&record("a/b", 50, 204_801, "Go"), &c));
    assert!(!evaluate_criteria(&record("a/b", 500, 10, "Rust"), &c));
    let mut none = record("a/b", 500, 10, "Go");
    none.language = None;
    assert!(!evaluate_criteria(&none, &c));
}

#[test]
fn criteria_validation_and_query() {
    let mut c = SelectionCriteria::default();
    c.extra_query_terms.push("archived:false".into());
    assert_eq!(c.query(), "language:Go stars:>=50 size:<=204800 archived:false");
    c.max_size_kb = 0;
    assert!(c.validate().is_err());
}

proptest! {
    #[test]
    fn raising_min_stars_never_admits(stars in 0u64..1000, size in 0u64..300_000, lo in 0u64..1000, bump in 0u64..1000) {
        let r = record("a/b", stars, size, "Go");
        let low = SelectionCriteria { min_stars: lo, ..SelectionCriteria::default() };
        let high = SelectionCriteria { min_stars: lo + bump, ..SelectionCriteria::default() };
        prop_assert!(!(evaluate_criteria(&r, &high) && !evaluate_criteria(&r, &low)));
    }
}

/// Serves `pages[page-1]` and counts requests.
struct PagedApi {
    pages: Vec<String>,
    calls: Arc<Mutex<Vec<String>>>,
    fail_on: Option<(usize, HttpResponse)>,
}

fn page_of(total: u64, items: &[(String, u64, u64)]) -> String {
    let items: Vec<_> = items
        .iter()
        .map(|(n, s, z)| {
            serde_json::json!({
                "full_name": n, "clone_url": format!("https://x/{n}.git"),
                "stargazers_count": s, "size": z, "default_branch": "main", "language": "Go"
            })
        })
        .collect();
    serde_json::json!({"total_count": total, "items": items}).to_string()
}

impl Transport for PagedApi {
    fn get(&self, url: &str, _h: &[(String, String)]) -> Result<HttpResponse, SearchError> {
        let mut calls = self.calls.lock().unwrap();
        calls.push(url.to_string());
        let page: usize = url.rsplit("page=").next().unwrap().parse().unwrap();
        if let Some((n, resp)) = &self.fail_on {
            if *n == page {
                return Ok(resp.clone());
            }
        }
        Ok(HttpResponse {
            status: 200,
            headers: BTreeMap::new(),
            body: self.pages.get(page - 1).cloned().unwrap_or_else(|| page_of(0, &[])),
        })
    }
}

fn full_page(offset: usize, dup_from_prev: bool) -> Vec<(String, u64, u64)> {
    (0..PER_PAGE)
        .map(|i| {
            let k = if dup_from_prev && i == 0 { offset - 1 } else { offset + i };
            (format!("o{k}/r"), 60 + k as u64, 100)
        })
        .collect()
}

#[test]
fn pagination_filters_and_dedupes() {
    let calls = Arc::new(Mutex::new(Vec::new()));
    let mut p3 = vec![("low/stars".to_string(), 3, 1), ("big/repo".to_string(), 90, 300_000)];
    p3.push(("o5/r".to_string(), 70, 1));
    let api = PagedApi {
        pages: vec![
            page_of(250, &full_page(0, false)),
            page_of(250, &full_page(100, true)),
            page_of(250, &p3),
        ],
        calls: calls.clone(),
        fail_on: None,
    };
    let c = SearchClient::new(Box::new(api), Auth::Anonymous).with_bucket(TokenBucket::new(100, 6000));
    let all = c.search_repositories(&SelectionCriteria::default(), 5).unwrap();
    // the third page is short, so no fourth request
    assert_eq!(calls.lock().unwrap().len(), 3);
    assert_eq!(all.len(), 199);
    let names: std::collections::HashSet<_> = all.iter().map(|r| &r.full_name).collect();
    assert_eq!(names.len(), all.len());
    assert!(all.iter().all(|r| r.stars >= 50 && r.size_kb <= 204_800));

    drop(c);
    let calls = Arc::new(Mutex::new(Vec::new()));
    let api = PagedApi {
        pages: vec![page_of(1000, &full_page(0, false)), page_of(1000, &full_page(100, false))],
        calls: calls.clone(),
        fail_on: None,
    };
    let c = SearchClient::new(Box::new(api), Auth::Anonymous).with_bucket(TokenBucket::new(100, 6000));
    assert_eq!(c.search_repositories(&SelectionCriteria::default(), 1).unwrap().len(), 100);
    assert_eq!(calls.lock().unwrap().len(), 1);
    assert!(matches!(
        c.search_repositories(&SelectionCriteria::default(), 0),
        Err(SearchError::InvalidArgument(_))
    ));
}

#[test]
fn cache_avoids_requery_and_rate_limit_is_surfaced() {
    let tmp = tempfile::tempdir().unwrap();
    let calls = Arc::new(Mutex::new(Vec::new()));
    let limited = HttpResponse {
        status: 403,
        headers: BTreeMap::from([("retry-after".to_string(), "42".to_string())]),
        body: "API rate limit exceeded".into(),
    };
    let api = PagedApi {
        pages: vec![page_of(300, &full_page(0, false)), page_of(300, &full_page(100, false))],
        calls: calls.clone(),
        fail_on: Some((2, limited)),
    };
    let c = SearchClient::new(Box::new(api), Auth::Anonymous)
        .with_cache(tmp.path())
        .with_bucket(TokenBucket::new(100, 6000));
    match c.search_repositories(&SelectionCriteria::default(), 3) {
        Err(SearchError::RateLimited { retry_after }) => assert_eq!(retry_after, Duration::from_secs(42)),
        other => panic!("expected a rate limit, got {other:?}"),
    }
    assert_eq!(calls.lock().unwrap().len(), 2);

    // resume: page 1 comes from the cache
    let calls2 = Arc::new(Mutex::new(Vec::new()));
    let api = PagedApi {
        pages: vec![String::new(), page_of(300, &full_page(100, false)), page_of(300, &[])],
        calls: calls2.clone(),
        fail_on: None,
    };
    let c = SearchClient::new(Box::new(api), Auth::Anonymous)
        .with_cache(tmp.path())
        .with_bucket(TokenBucket::new(100, 6000));
    let all = c.search_repositories(&SelectionCriteria::default(), 3).unwrap();
    assert_eq!(all.len(), 200);
    let urls = calls2.lock().unwrap();
    assert!(urls.iter().all(|u| !u.ends_with("&page=1")));
}

#[test]
fn http_errors_are_reported() {
    let api = PagedApi {
        pages: vec![],
        calls: Arc::default(),
        fail_on: Some((1, HttpResponse { status: 422, headers: BTreeMap::new(), body: "bad".into() })),
    };
    let c = SearchClient::new(Box::new(api), Auth::Anonymous);
    assert!(matches!(
        c.search_repositories(&SelectionCriteria::default(), 1),
        Err(SearchError::Http { status: 422, .. })
    ));
}

struct Probe {
    tmp: tempfile::TempDir,
    sim: Arc<SimulatedBackend>,
    runner: Runner,
}

fn probe_env() -> Probe {
    let tmp = tempfile::tempdir().unwrap();
    let sim = Arc::new(SimulatedBackend::new());
    let runner = Runner::new(sim.clone(), tmp.path().join("logs"), 2);
    Probe { tmp, sim, runner }
}

fn origin(p: &Probe, workflows: usize, test_body: &str) -> RepositoryRecord {
    let b = RepoBuilder::init(&p.tmp.path().join("origin")).unwrap();
    go_skeleton(&b, "example.com/m");
    b.remove(".github/workflows/ci.yml");
    for i in 0..workflows {
        b.write(&format!(".github/workflows/ci{i}.yml"), GO_WORKFLOW);
    }
    b.write(".github/workflows/lint.yml", "on: push\njobs:\n  l:\n    runs-on: x\n    steps:\n      - uses: golangci/golangci-lint-action@v6\n");
    b.write("m_test.go", test_body);
    b.commit("init", "2023-01-02T00:00:00Z").unwrap();
    RepositoryRecord {
        clone_url: b.dir().display().to_string(),
        ..record("o/m", 100, 10, "Go")
    }
}

fn run_probe(p: &Probe, r: &RepositoryRecord, config: &ProbeConfig) -> (RepoProbeResult, std::path::PathBuf) {
    let work = p.tmp.path().join("probe");
    let res = probe_repository(r, &work, &p.runner, &[&GoAdapter], config);
    assert!(res.is_consistent(), "{res:?}");
    (res, work)
}

#[test]
fn probe_single_workflow_retrieves_report() {
    let p = probe_env();
    let r = origin(&p, 1, "//sim:test TestA\n");
    let (res, work) = run_probe(&p, &r, &ProbeConfig::default());
    assert!(res.executed && res.report_retrieved, "{res:?}");
    assert_eq!(res.test_workflow_count, 1);
    assert_eq!(res.workflow_file.as_deref(), Some("ci0.yml"));
    assert_eq!(res.adapter.as_deref(), Some("go"));
    assert!(res.head_test_run.as_ref().unwrap().is_passing());
    assert_eq!(p.sim.runs()[0].label, "probe:o/m");
    assert!(!work.exists());
    assert!(p.runner.live_containers().is_empty());
}

#[test]
fn probe_zero_or_two_workflows_is_not_executed() {
    let p = probe_env();
    let r = origin(&p, 0, "//sim:test TestA\n");
    let (res, _) = run_probe(&p, &r, &ProbeConfig::default());
    assert!(!res.executed && !res.report_retrieved);
    assert_eq!(res.test_workflow_count, 0);

    let p = probe_env();
    let r = origin(&p, 2, "//sim:test TestA\n");
    let (res, _) = run_probe(&p, &r, &ProbeConfig::default());
    assert!(!res.executed && !res.report_retrieved);
    assert_eq!(res.test_workflow_count, 2);
    assert!(p.sim.runs().is_empty());

    let widened = ProbeConfig {
        allow_multiple_workflows: true,
        ..ProbeConfig::default()
    };
    let (res, _) = run_probe(&p, &r, &widened);
    assert!(res.report_retrieved);
    assert_eq!(res.workflow_file.as_deref(), Some("ci0.yml"));
}

#[test]
fn probe_timeout_crash_and_clone_failure() {
    let p = probe_env();
    let r = origin(&p, 1, "//sim:test TestA\n");
    p.sim.inject("probe:o/m", Fault::Timeout);
    let (res, work) = run_probe(&p, &r, &ProbeConfig::default());
    assert!(res.executed && !res.report_retrieved);
    assert_eq!(res.note.as_deref(), Some("timeout"));
    assert!(!work.exists());

    let p = probe_env();
    let r = origin(&p, 1, "//sim:crash\n//sim:test TestA\n");
    let (res, _) = run_probe(&p, &r, &ProbeConfig::default());
    assert!(res.executed && !res.report_retrieved);

    let missing = RepositoryRecord {
        clone_url: p.tmp.path().join("nope").display().to_string(),
        ..record("o/x", 100, 1, "Go")
    };
    let (res, _) = run_probe(&p, &missing, &ProbeConfig::default());
    assert!(!res.executed);
    assert!(res.note.unwrap().starts_with("unprobeable"));
}

#[test]
fn registry_candidates_probe_in_order() {
    let p = probe_env();
    let r = origin(&p, 1, "//sim:test TestA\n");
    let reg = AdapterRegistry::with_builtin();
    let cands = reg.select("Go", None).unwrap();
    let res = probe_repository(&r, &p.tmp.path().join("w"), &p.runner, &cands, &ProbeConfig::default());
    assert_eq!(res.adapter.as_deref(), Some("go"));
    assert!(res.report_retrieved);
}

#[test]
fn record_validity_and_retention() {
    let mut r = record("a/b", 1, 1, "Go");
    assert!(r.is_valid() && !r.retained());
    r.probe = Some(RepoProbeResult {
        report_retrieved: true,
        executed: true,
        head_test_run: Some(Default::default()),
        ..RepoProbeResult::not_executed(1, "")
    });
    assert!(r.retained());
    assert!(!record("a/b/c", 1, 1, "Go").is_valid());
    assert!(!record("ab", 1, 1, "Go").is_valid());
}
