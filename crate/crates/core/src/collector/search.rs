use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate_criteria, RepositoryRecord, SelectionCriteria};

pub const GITHUB_API: &str = "https://api.github.com";
pub const PER_PAGE: usize = 100;
/// The search endpoint serves at most 1000 results.
const MAX_PAGES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("rate limit exceeded; retry after {retry_after:?}")]
    RateLimited { retry_after: Duration },
    #[error("network failure (re-run the stage to resume): {0}")]
    Network(String),
    #[error("search API returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("cannot parse search response: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("search cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    /// Lower-case names.
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, SearchError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, SearchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("bugharvest/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| SearchError::Network(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, SearchError> {
        let mut req = self.client.get(url);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| SearchError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_ascii_lowercase(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp.text().map_err(|e| SearchError::Network(e.to_string()))?;
        Ok(HttpResponse { status, headers, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    Token(String),
    Anonymous,
}

impl Auth {
    pub const TOKEN_VAR: &'static str = "GITHUB_TOKEN";

    /// The token from the environment, or `None` when unset. Callers choose
    /// anonymous access explicitly.
    pub fn from_env() -> Option<Self> {
        std::env::var(Self::TOKEN_VAR)
            .ok()
            .filter(|t| !t.trim().is_empty())
            .map(Auth::Token)
    }
}

/// Request budget shared by all users of one client.
pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_minute: u32) -> Self {
        Self {
            capacity: f64::from(capacity.max(1)),
            per_sec: f64::from(per_minute.max(1)) / 60.0,
            state: Mutex::new((f64::from(capacity.max(1)), Instant::now())),
        }
    }

    /// Takes one token, or returns how long until one is available.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let now = Instant::now();
        st.0 = (st.0 + now.duration_since(st.1).as_secs_f64() * self.per_sec).min(self.capacity);
        st.1 = now;
        if st.0 >= 1.0 {
            st.0 -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - st.0) / self.per_sec))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Deserialize)]
struct SearchPage {
    total_count: u64,
    items: Vec<ApiRepo>,
}

#[derive(Deserialize)]
struct ApiRepo {
    full_name: String,
    clone_url: String,
    stargazers_count: u64,
    size: u64,
    default_branch: String,
    language: Option<String>,
}

pub struct SearchClient {
    transport: Box<dyn Transport>,
    auth: Auth,
    base_url: String,
    cache_dir: Option<PathBuf>,
    bucket: TokenBucket,
}

impl SearchClient {
    pub fn new(transport: Box<dyn Transport>, auth: Auth) -> Self {
        // authenticated search allows 30 requests per minute
        let per_minute = if auth == Auth::Anonymous { 10 } else { 30 };
        Self {
            transport,
            auth,
            base_url: GITHUB_API.to_string(),
            cache_dir: None,
            bucket: TokenBucket::new(per_minute, per_minute),
        }
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_bucket(mut self, bucket: TokenBucket) -> Self {
        self.bucket = bucket;
        self
    }

    /// Pages through the search results until a short page, the reported
    /// total or `page_limit`. Records are deduplicated by `full_name` in
    /// first-seen order and filtered by the criteria.
    pub fn search_repositories(
        &self,
        criteria: &SelectionCriteria,
        page_limit: usize,
    ) -> Result<Vec<RepositoryRecord>, SearchError> {
        if page_limit == 0 {
            return Err(SearchError::InvalidArgument("page_limit must be at least 1".into()));
        }
        criteria.validate().map_err(SearchError::InvalidArgument)?;
        let query = criteria.query();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut fetched = 0u64;
        for page in 1..=page_limit.min(MAX_PAGES) {
            let body = self.fetch_page(&query, page)?;
            let parsed: SearchPage = serde_json::from_str(&body).map_err(|e| SearchError::Parse(e.to_string()))?;
            let n = parsed.items.len();
            fetched += n as u64;
            for item in parsed.items {
                let record = RepositoryRecord {
                    full_name: item.full_name,
                    clone_url: item.clone_url,
                    stars: item.stargazers_count,
                    size_kb: item.size,
                    default_branch: item.default_branch,
                    language: item.language,
                    probe: None,
                };
                if !record.is_valid() || !evaluate_criteria(&record, criteria) {
                    tracing::debug!(repo = %record.full_name, "dropping search result outside criteria");
                    continue;
                }
                if seen.insert(record.full_name.clone()) {
                    out.push(record);
                }
            }
            if n < PER_PAGE || fetched >= parsed.total_count {
                break;
            }
        }
        Ok(out)
    }

    fn cache_path(&self, query: &str, page: usize) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let key = hex::encode(Sha256::digest(format!("{query}\n{page}")));
        Some(dir.join(format!("search-{key}.json")))
    }

    fn fetch_page(&self, query: &str, page: usize) -> Result<String, SearchError> {
        let cache = self.cache_path(query, page);
        if let Some(path) = &cache {
            if let Ok(text) = fs::read_to_string(path) {
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                    if entry.query == query && entry.page == page {
                        return Ok(entry.body);
                    }
                }
            }
        }
        let mut url = reqwest::Url::parse(&format!("{}/search/repositories", self.base_url))
            .map_err(|e| SearchError::InvalidArgument(e.to_string()))?;
        url.query_pairs_mut()
            .append_pair("q", query)
            .append_pair("sort", "stars")
            .append_pair("order", "desc")
            .append_pair("per_page", &PER_PAGE.to_string())
            .append_pair("page", &page.to_string());
        let mut headers = vec![
            ("accept".to_string(), "application/vnd.github+json".to_string()),
            ("x-github-api-version".to_string(), "2022-11-28".to_string()),
        ];
        if let Auth::Token(t) = &self.auth {
            headers.push(("authorization".to_string(), format!("Bearer {t}")));
        }
        if let Err(wait) = self.bucket.try_acquire() {
            if wait > Duration::from_secs(120) {
                return Err(SearchError::RateLimited { retry_after: wait });
            }
            self.bucket.acquire();
        }
        let resp = self.transport.get(url.as_str(), &headers)?;
        if let Some(retry_after) = rate_limit_delay(&resp) {
            return Err(SearchError::RateLimited { retry_after });
        }
        if resp.status != 200 {
            return Err(SearchError::Http {
                status: resp.status,
                body: resp.body.chars().take(500).collect(),
            });
        }
        if let Some(path) = &cache {
            let entry = CacheEntry {
                query: query.to_string(),
                page,
                body: resp.body.clone(),
            };
            let io = |source| SearchError::Io { path: path.clone(), source };
            fs::create_dir_all(path.parent().expect("cache file has a parent")).map_err(io)?;
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&entry).expect("cache entry serializes")).map_err(io)?;
            fs::rename(&tmp, path).map_err(io)?;
        }
        Ok(resp.body)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    query: String,
    page: usize,
    body: String,
}

/// `Some` for 403/429 responses that signal an exhausted budget.
fn rate_limit_delay(resp: &HttpResponse) -> Option<Duration> {
    if resp.status != 403 && resp.status != 429 {
        return None;
    }
    if let Some(secs) = resp.headers.get("retry-after").and_then(|v| v.trim().parse::<u64>().ok()) {
        return Some(Duration::from_secs(secs));
    }
    let exhausted = resp.headers.get("x-ratelimit-remaining").map(|v| v.trim()) == Some("0");
    let reset = resp.headers.get("x-ratelimit-reset").and_then(|v| v.trim().parse::<u64>().ok());
    match reset {
        Some(reset) if exhausted || resp.status == 429 => {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
            Some(Duration::from_secs(reset.saturating_sub(now)))
        }
        _ if resp.status == 429 || resp.body.to_ascii_lowercase().contains("rate limit") => {
            Some(Duration::from_secs(60))
        }
        _ => None,
    }
}
