use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::collector::{RepositoryRecord, SelectionCriteria, GITHUB_API};
use crate::runner::DEFAULT_TIMEOUT_SECS;

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date")
}

fn default_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 1, 31).expect("valid date")
}

/// Everything a run needs. Read from one TOML file; missing keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub criteria: SelectionCriteria,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub workers: usize,
    /// Stability runs per version.
    pub k: usize,
    pub timeout_secs: u64,
    pub page_limit: usize,
    /// Pipeline state: logs, mirrors, candidates, bundles.
    pub state_dir: PathBuf,
    pub store_dir: PathBuf,
    pub cache_dir: PathBuf,
    /// Adapter id forced for every repository.
    pub adapter: Option<String>,
    /// Run the first test workflow of repositories that have several.
    pub allow_multiple_workflows: bool,
    pub api_url: String,
    /// Search without a token even if one is set.
    pub anonymous: bool,
    /// Never contact the search API; only seeds and cached pages are used.
    pub offline_only: bool,
    /// Used instead of search when non-empty.
    pub seed_repos: Vec<RepositoryRecord>,
    /// Timestamp stamped on entries; `SOURCE_DATE_EPOCH` or the clock if unset.
    pub created_at: Option<DateTime<Utc>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            criteria: SelectionCriteria::default(),
            window_start: default_start(),
            window_end: default_end(),
            workers: 32,
            k: 5,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            page_limit: 10,
            state_dir: PathBuf::from("bugharvest-state"),
            store_dir: PathBuf::from("bugharvest-store"),
            cache_dir: PathBuf::from("bugharvest-state/cache"),
            adapter: None,
            allow_multiple_workflows: false,
            api_url: GITHUB_API.to_string(),
            anonymous: false,
            offline_only: false,
            seed_repos: Vec::new(),
            created_at: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Loads the file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.state_dir, &mut c.store_dir, &mut c.cache_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.timeout_secs == 0 {
            return bad("timeout_secs must be positive");
        }
        if self.page_limit == 0 {
            return bad("page_limit must be at least 1");
        }
        if self.window_start > self.window_end {
            return bad("window_start must not be after window_end");
        }
        self.criteria.validate().map_err(PipelineError::Config)?;
        for r in &self.seed_repos {
            if !r.is_valid() {
                return Err(PipelineError::Config(format!("seed repo {:?} is not owner/name", r.full_name)));
            }
        }
        Ok(())
    }

    pub fn resolved_created_at(&self) -> Option<DateTime<Utc>> {
        self.created_at.or_else(|| {
            let secs = std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse::<i64>().ok()?;
            DateTime::from_timestamp(secs, 0)
        })
    }
}
