use super::shell::{self, SimpleCommand};
use super::{
    raw_texts, workspace_report_path, BuildAdapter, FileClass, Instrumentation, ReportFormat,
};

const RUN_WRAPPERS: &[&str] = &["poetry", "pipenv", "uv", "pdm", "hatch"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PyTool {
    Pytest,
    Unittest,
    Xmlrunner,
}

#[derive(Debug, Clone, Copy)]
struct PyInvocation {
    tool: PyTool,
    /// Index of the `-m` word, when invoked as a module.
    module_flag: Option<usize>,
    /// Index of the tool word (`pytest`, or the module name).
    tool_word: usize,
}

fn is_python(program: &str) -> bool {
    let Some(rest) = shell::program_name(program).strip_prefix("python") else {
        return false;
    };
    rest.is_empty() || rest.chars().all(|c| c.is_ascii_digit() || c == '.')
}

fn python_invocation(cmd: &SimpleCommand) -> Option<PyInvocation> {
    let mut p = cmd.program_index()?;
    let words = &cmd.words;
    if RUN_WRAPPERS.contains(&shell::program_name(&words[p].text))
        && words.get(p + 1).is_some_and(|w| w.text == "run")
    {
        p += 2;
    }
    let program = words.get(p)?;
    match shell::program_name(&program.text) {
        "pytest" | "py.test" => {
            return Some(PyInvocation {
                tool: PyTool::Pytest,
                module_flag: None,
                tool_word: p,
            })
        }
        name if is_python(name) => {}
        _ => return None,
    }
    // interpreter options may precede `-m`; `-W` and `-X` take a value
    let mut m = p + 1;
    loop {
        let w = words.get(m)?.text.as_str();
        match w {
            "-m" => break,
            "-W" | "-X" => m += 2,
            _ if w.starts_with('-') => m += 1,
            _ => return None,
        }
    }
    let tool = match words.get(m + 1)?.text.as_str() {
        "pytest" => PyTool::Pytest,
        "unittest" => PyTool::Unittest,
        "xmlrunner" => PyTool::Xmlrunner,
        _ => return None,
    };
    Some(PyInvocation {
        tool,
        module_flag: Some(m),
        tool_word: m + 1,
    })
}

/// Python convention: `test_*.py`, `*_test.py`, `conftest.py`, and anything
/// inside a `tests/` or `test/` directory are tests; other `.py` files are
/// source.
fn classify_python(path: &str) -> FileClass {
    let mut parts: Vec<&str> = path.split('/').collect();
    let file = parts.pop().unwrap_or("");
    if parts.iter().any(|d| *d == "tests" || *d == "test") {
        return FileClass::Test;
    }
    if let Some(stem) = file.strip_suffix(".py") {
        if stem.starts_with("test_") || stem.ends_with("_test") || stem == "conftest" {
            FileClass::Test
        } else {
            FileClass::Source
        }
    } else {
        FileClass::NonCode
    }
}

pub const PYTEST_REPORT_FILE: &str = "pytest.xml";

#[derive(Debug, Clone, Copy, Default)]
pub struct PytestAdapter;

impl BuildAdapter for PytestAdapter {
    fn id(&self) -> &'static str {
        "pytest"
    }

    fn languages(&self) -> &'static [&'static str] {
        &["Python"]
    }

    fn classify_file(&self, path: &str) -> FileClass {
        classify_python(path)
    }

    fn matches_command(&self, cmd: &SimpleCommand) -> bool {
        python_invocation(cmd).is_some_and(|inv| inv.tool == PyTool::Pytest)
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
        let wanted = format!(
            "--junitxml={}",
            workspace_report_path(job_id, Some(PYTEST_REPORT_FILE))
        );
        let mut raw = raw_texts(cmd, script);
        let existing = cmd.words.iter().position(|w| {
            w.text.starts_with("--junitxml") || w.text.starts_with("--junit-xml")
        });
        match existing {
            Some(i) if cmd.words[i].text == wanted => Instrumentation::AlreadyInstrumented,
            Some(i) => {
                if !cmd.words[i].text.contains('=') && i + 1 < raw.len() {
                    raw.remove(i + 1);
                }
                raw[i] = shell::quote(&wanted);
                Instrumentation::Replace(raw.join(" "))
            }
            None => {
                raw.push(shell::quote(&wanted));
                Instrumentation::Replace(raw.join(" "))
            }
        }
    }
}

/// The standard library runner has no report option, so `python -m unittest`
/// is swapped for the drop-in `xmlrunner` module (installed on the fly),
/// which accepts the same arguments.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnittestAdapter;

impl BuildAdapter for UnittestAdapter {
    fn id(&self) -> &'static str {
        "unittest"
    }

    fn languages(&self) -> &'static [&'static str] {
        &["Python"]
    }

    fn classify_file(&self, path: &str) -> FileClass {
        classify_python(path)
    }

    fn matches_command(&self, cmd: &SimpleCommand) -> bool {
        python_invocation(cmd)
            .is_some_and(|inv| matches!(inv.tool, PyTool::Unittest | PyTool::Xmlrunner))
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
        let Some(inv) = python_invocation(cmd) else {
            return Instrumentation::Unrecognized("not a python module invocation".into());
        };
        let Some(m) = inv.module_flag else {
            return Instrumentation::Unrecognized("unittest must be run as a module".into());
        };
        let dir = workspace_report_path(job_id, None);
        let raw = raw_texts(cmd, script);
        let lead = raw[..m].join(" ");
        let args = &raw[inv.tool_word + 1..];
        match inv.tool {
            PyTool::Unittest => {
                let mut text = format!(
                    "{lead} -m pip install -q unittest-xml-reporting && {lead} -m xmlrunner -o {}",
                    shell::quote(&dir)
                );
                for a in args {
                    text.push(' ');
                    text.push_str(a);
                }
                Instrumentation::Replace(text)
            }
            PyTool::Xmlrunner => {
                let words = &cmd.words[inv.tool_word + 1..];
                let has_dir = words
                    .windows(2)
                    .any(|w| w[0].text == "-o" && w[1].text == dir);
                if has_dir {
                    Instrumentation::AlreadyInstrumented
                } else {
                    let mut raw = raw;
                    raw.insert(inv.tool_word + 1, format!("-o {}", shell::quote(&dir)));
                    Instrumentation::Replace(raw.join(" "))
                }
            }
            PyTool::Pytest => Instrumentation::Unrecognized("pytest is not unittest".into()),
        }
    }
}
