use super::shell::{self, SimpleCommand};
use super::{
    raw_texts, workspace_report_path, BuildAdapter, FileClass, Instrumentation, ReportFormat,
};

const JVM_SOURCE_EXTENSIONS: &[&str] = &["java", "kt", "kts", "groovy", "scala"];

/// Maven/Gradle layout: anything under a `src/test/` tree is test code,
/// anything under `src/main/` or with a JVM source extension is source.
fn classify_jvm(path: &str) -> FileClass {
    let with_root = format!("/{path}");
    if with_root.contains("/src/test/") {
        return FileClass::Test;
    }
    if with_root.contains("/src/main/") {
        return FileClass::Source;
    }
    let ext = path
        .rsplit('/')
        .next()
        .and_then(|f| f.rsplit_once('.'))
        .map(|(_, e)| e);
    match ext {
        Some(e) if JVM_SOURCE_EXTENSIONS.contains(&e) && !path.ends_with(".gradle.kts") => {
            FileClass::Source
        }
        _ => FileClass::NonCode,
    }
}

const MAVEN_TEST_PHASES: &[&str] = &[
    "test",
    "integration-test",
    "package",
    "verify",
    "install",
    "deploy",
];

const SUREFIRE_DIR_PROP: &str = "-Dsurefire.reportsDirectory=";

#[derive(Debug, Clone, Copy, Default)]
pub struct MavenAdapter;

impl BuildAdapter for MavenAdapter {
    fn id(&self) -> &'static str {
        "maven"
    }

    fn languages(&self) -> &'static [&'static str] {
        &["Java", "Kotlin", "Scala"]
    }

    fn classify_file(&self, path: &str) -> FileClass {
        classify_jvm(path)
    }

    fn matches_command(&self, cmd: &SimpleCommand) -> bool {
        let argv = cmd.argv();
        let Some(program) = argv.first() else {
            return false;
        };
        if !matches!(shell::program_name(&program.text), "mvn" | "mvnw" | "mvn.cmd") {
            return false;
        }
        let skipped = argv.iter().any(|w| {
            matches!(
                w.text.as_str(),
                "-DskipTests" | "-DskipTests=true" | "-Dmaven.test.skip=true"
            )
        });
        let runs_tests = argv[1..].iter().any(|w| {
            !w.text.starts_with('-')
                && (MAVEN_TEST_PHASES.contains(&w.text.as_str()) || w.text.ends_with(":test"))
        });
        runs_tests && !skipped
    }

    fn report_format(&self) -> ReportFormat {
        ReportFormat::JunitXml
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
            return Instrumentation::Unrecognized("empty maven command".into());
        };
        let wanted = format!("{SUREFIRE_DIR_PROP}{}", workspace_report_path(job_id, None));
        let mut raw = raw_texts(cmd, script);
        match cmd.words.iter().position(|w| w.text.starts_with(SUREFIRE_DIR_PROP)) {
            Some(i) if cmd.words[i].text == wanted => Instrumentation::AlreadyInstrumented,
            Some(i) => {
                raw[i] = shell::quote(&wanted);
                Instrumentation::Replace(raw.join(" "))
            }
            None => {
                raw.insert(program + 1, shell::quote(&wanted));
                Instrumentation::Replace(raw.join(" "))
            }
        }
    }
}

const GRADLE_TEST_TASKS: &[&str] = &["test", "check", "build"];

/// Gradle always writes JUnit XML under `build/test-results`, but offers no
/// command-line switch for the location, so the report is picked up from
/// there after the run instead of being redirected.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradleAdapter;

impl BuildAdapter for GradleAdapter {
    fn id(&self) -> &'static str {
        "gradle"
    }

    fn languages(&self) -> &'static [&'static str] {
        &["Java", "Kotlin", "Groovy"]
    }

    fn classify_file(&self, path: &str) -> FileClass {
        classify_jvm(path)
    }

    fn matches_command(&self, cmd: &SimpleCommand) -> bool {
        let argv = cmd.argv();
        let Some(program) = argv.first() else {
            return false;
        };
        if !matches!(
            shell::program_name(&program.text),
            "gradle" | "gradlew" | "gradlew.bat"
        ) {
            return false;
        }
        let mut excluded = false;
        let mut runs_tests = false;
        let mut i = 1;
        while i < argv.len() {
            let w = argv[i].text.as_str();
            if w == "-x" || w == "--exclude-task" {
                if argv.get(i + 1).is_some_and(|t| t.text == "test" || t.text.ends_with(":test")) {
                    excluded = true;
                }
                i += 2;
                continue;
            }
            if !w.starts_with('-') {
                let task = w.rsplit(':').next().unwrap_or(w);
                if GRADLE_TEST_TASKS.contains(&task) {
                    runs_tests = true;
                }
            }
            i += 1;
        }
        runs_tests && !excluded
    }

    fn report_format(&self) -> ReportFormat {
        ReportFormat::JunitXml
    }

    fn instrument(
        &self,
        _script: &str,
        _cmds: &[SimpleCommand],
        _index: usize,
        _job_id: &str,
    ) -> Instrumentation {
        Instrumentation::AlreadyInstrumented
    }

    fn collect_globs(&self) -> Vec<String> {
        vec!["**/build/test-results/**/*.xml".to_string()]
    }
}
