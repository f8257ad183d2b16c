use super::shell::{self, SimpleCommand};
use super::{
    raw_texts, workspace_report_path, BuildAdapter, FileClass, Instrumentation, ReportFormat,
};

pub const GO_REPORT_FILE: &str = "go-test.json";

/// `go test`: `*_test.go` files are tests, other `*.go` files are source.
/// Reports are the `-json` event stream tee'd into the job's report dir.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoAdapter;

impl BuildAdapter for GoAdapter {
    fn id(&self) -> &'static str {
        "go"
    }

    fn languages(&self) -> &'static [&'static str] {
        &["Go"]
    }

    fn classify_file(&self, path: &str) -> FileClass {
        if path.ends_with("_test.go") {
            FileClass::Test
        } else if path.ends_with(".go") {
            FileClass::Source
        } else {
            FileClass::NonCode
        }
    }

    fn matches_command(&self, cmd: &SimpleCommand) -> bool {
        let argv = cmd.argv();
        argv.len() >= 2 && shell::program_name(&argv[0].text) == "go" && argv[1].text == "test"
    }

    fn report_format(&self) -> ReportFormat {
        ReportFormat::GoJson
    }

    fn instrument(
        &self,
        script: &str,
        cmds: &[SimpleCommand],
        index: usize,
        job_id: &str,
    ) -> Instrumentation {
        let cmd = &cmds[index];
        let Some(program) = cmd.program_index() else {
            return Instrumentation::Unrecognized("empty go command".into());
        };
        let report_path = workspace_report_path(job_id, Some(GO_REPORT_FILE));
        let has_json = cmd.argv()[2..]
            .iter()
            .any(|w| matches!(w.text.as_str(), "-json" | "-json=true" | "--json"));
        let tees_report = cmds.get(index + 1).is_some_and(|next| {
            let argv = next.argv();
            argv.first().is_some_and(|w| w.text == "tee")
                && argv.last().is_some_and(|w| w.text == report_path)
        });
        if has_json && tees_report {
            return Instrumentation::AlreadyInstrumented;
        }

        let mut raw = raw_texts(cmd, script);
        if !has_json {
            raw.insert(program + 2, "-json".to_string());
        }
        let mut text = raw.join(" ");
        if !tees_report {
            text.push_str(" | tee -a ");
            text.push_str(&shell::quote(&report_path));
        }
        Instrumentation::Replace(text)
    }
}
