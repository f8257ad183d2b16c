//! Per build-system knowledge, behind one trait.
//!
//! Each [`BuildAdapter`] knows how to tell source files from test files,
//! recognise a test invocation in a shell step, rewrite that invocation so it
//! leaves a machine-readable report behind, and read the report back.

mod go;
mod jvm;
mod python;
pub mod report;
pub mod shell;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use go::GoAdapter;
pub use jvm::{GradleAdapter, MavenAdapter};
pub use python::{PytestAdapter, UnittestAdapter};
pub use report::{
    Outcome, OutcomeKey, ReportError, ReportFormat, RunSummary, TestCaseResult, TestId, TestRun,
};

use shell::SimpleCommand;

/// Directory, relative to the workspace root, that receives report artifacts.
pub const REPORTS_DIR: &str = "reports";

/// Shell expression for the workspace root inside the runner container.
pub const WORKSPACE_VAR: &str = "$GITHUB_WORKSPACE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileClass {
    Source,
    Test,
    NonCode,
}

impl fmt::Display for FileClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FileClass::Source => "source",
            FileClass::Test => "test",
            FileClass::NonCode => "non_code",
        })
    }
}

/// Where a test job leaves its report and in which format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub job_id: String,
    /// Workspace-relative directory, `reports/<job_id>`.
    pub report_dir: String,
    pub format: ReportFormat,
    /// Workspace-relative globs of files to copy into `report_dir` after the
    /// run, for tools whose report location cannot be set from the command line.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub collect_globs: Vec<String>,
}

impl ReportSpec {
    pub fn new(job_id: &str, format: ReportFormat, collect_globs: Vec<String>) -> Self {
        Self {
            job_id: job_id.to_string(),
            report_dir: report_dir_for(job_id),
            format,
            collect_globs,
        }
    }
}

pub fn report_dir_for(job_id: &str) -> String {
    format!("{REPORTS_DIR}/{job_id}")
}

/// `"$GITHUB_WORKSPACE/reports/<job>/<file>"`, the in-container report path.
pub(crate) fn workspace_report_path(job_id: &str, file: Option<&str>) -> String {
    match file {
        Some(f) => format!("{WORKSPACE_VAR}/{REPORTS_DIR}/{job_id}/{f}"),
        None => format!("{WORKSPACE_VAR}/{REPORTS_DIR}/{job_id}"),
    }
}

/// What an adapter wants to do with one recognised test command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instrumentation {
    /// Replace the command's text (its full word span) with this.
    Replace(String),
    /// The command already emits the report; leave it alone.
    AlreadyInstrumented,
    /// The command is a test command but its shape is not understood.
    Unrecognized(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandRewrite {
    pub command: String,
    pub report: Option<ReportSpec>,
    pub warnings: Vec<String>,
}

pub trait BuildAdapter: Send + Sync + fmt::Debug {
    fn id(&self) -> &'static str;

    /// Hosting-platform language tags this adapter serves.
    fn languages(&self) -> &'static [&'static str];

    fn classify_file(&self, path: &str) -> FileClass;

    /// Whether a single simple command invokes this tool's test entry point.
    fn matches_command(&self, cmd: &SimpleCommand) -> bool;

    fn report_format(&self) -> ReportFormat;

    /// Decide how to instrument `cmds[index]`, which [`matches_command`]
    /// accepted. `cmds` is the whole script so adapters can inspect
    /// neighbouring pipeline members; `script` is the text the word spans
    /// index into.
    ///
    /// [`matches_command`]: BuildAdapter::matches_command
    fn instrument(
        &self,
        script: &str,
        cmds: &[SimpleCommand],
        index: usize,
        job_id: &str,
    ) -> Instrumentation;

    fn collect_globs(&self) -> Vec<String> {
        Vec::new()
    }

    /// Token-aware: true iff some simple command in the line is a test
    /// invocation. Substrings inside arguments never match.
    fn is_test_command(&self, command_line: &str) -> bool {
        shell::split_commands(command_line)
            .iter()
            .any(|c| self.matches_command(c))
    }

    /// Rewrites every test command in `command_line` so it emits a report
    /// under `reports/<job_id>`. Idempotent.
    fn rewrite_test_command(&self, command_line: &str, job_id: &str) -> CommandRewrite {
        let cmds = shell::split_commands(command_line);
        let mut edits = Vec::new();
        let mut warnings = Vec::new();
        let mut instrumented = false;
        for (i, cmd) in cmds.iter().enumerate() {
            if !self.matches_command(cmd) {
                continue;
            }
            match self.instrument(command_line, &cmds, i, job_id) {
                Instrumentation::Replace(text) => {
                    edits.push((cmd.span(), text));
                    instrumented = true;
                }
                Instrumentation::AlreadyInstrumented => instrumented = true,
                Instrumentation::Unrecognized(why) => warnings.push(why),
            }
        }
        let command = shell::splice(command_line, edits);
        let report = instrumented
            .then(|| ReportSpec::new(job_id, self.report_format(), self.collect_globs()));
        CommandRewrite {
            command,
            report,
            warnings,
        }
    }

    fn parse_test_report(&self, artifact_dir: &Path) -> Result<TestRun, ReportError> {
        report::parse_report_dir(artifact_dir)
    }
}

/// Raw source text of each word of a command.
pub(crate) fn raw_texts(cmd: &SimpleCommand, script: &str) -> Vec<String> {
    cmd.words
        .iter()
        .map(|w| script[w.span.clone()].to_string())
        .collect()
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate adapter id `{0}`")]
    DuplicateId(String),
    #[error("unknown adapter `{0}`")]
    Unknown(String),
    #[error("no adapter registered for language `{0}`")]
    NoAdapterForLanguage(String),
}

#[derive(Debug)]
pub struct AdapterRegistry {
    adapters: Vec<Box<dyn BuildAdapter>>,
}

impl AdapterRegistry {
    pub fn new(adapters: Vec<Box<dyn BuildAdapter>>) -> Result<Self, RegistryError> {
        let mut seen = BTreeSet::new();
        for a in &adapters {
            if !seen.insert(a.id()) {
                return Err(RegistryError::DuplicateId(a.id().to_string()));
            }
        }
        Ok(Self { adapters })
    }

    pub fn with_builtin() -> Self {
        Self::new(vec![
            Box::new(GoAdapter),
            Box::new(MavenAdapter),
            Box::new(GradleAdapter),
            Box::new(PytestAdapter),
            Box::new(UnittestAdapter),
        ])
        .expect("builtin adapter ids are unique")
    }

    pub fn ids(&self) -> Vec<&'static str> {
        self.adapters.iter().map(|a| a.id()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn BuildAdapter, RegistryError> {
        self.adapters
            .iter()
            .find(|a| a.id() == id)
            .map(|a| a.as_ref())
            .ok_or_else(|| RegistryError::Unknown(id.to_string()))
    }

    /// Candidates for a repository language, in registry order. Language tags
    /// compare case-insensitively.
    pub fn for_language(&self, language: &str) -> Vec<&dyn BuildAdapter> {
        self.adapters
            .iter()
            .filter(|a| {
                a.languages()
                    .iter()
                    .any(|l| l.eq_ignore_ascii_case(language))
            })
            .map(|a| a.as_ref())
            .collect()
    }

    /// The adapter named by `override_id`, else the language candidates.
    pub fn select(
        &self,
        language: &str,
        override_id: Option<&str>,
    ) -> Result<Vec<&dyn BuildAdapter>, RegistryError> {
        if let Some(id) = override_id {
            return Ok(vec![self.get(id)?]);
        }
        let c = self.for_language(language);
        if c.is_empty() {
            return Err(RegistryError::NoAdapterForLanguage(language.to_string()));
        }
        Ok(c)
    }
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}
