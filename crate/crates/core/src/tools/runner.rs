//! Test runners for synthesized tools.
//!
//! A runner receives the tool, a working directory inside the sandbox, a
//! time limit and an output cap, and reports pass/fail with the captured
//! output. Network isolation is the job of the process or container the
//! runner launches; [`LocalProcessRunner`] only clears the environment,
//! confines the working directory and bounds time and output.

use std::collections::HashMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::ToolEntry;

#[derive(Debug, Clone)]
pub struct RunRequest<'a> {
    pub tool: &'a ToolEntry,
    pub workdir: PathBuf,
    pub time_limit: Duration,
    pub output_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub passed: bool,
    pub output: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunnerError {
    #[error("test runner unavailable: {0}")]
    Unavailable(String),
    #[error("tool test exceeded {limit_ms} ms")]
    Timeout { limit_ms: u64 },
}

pub trait TestRunner: Send {
    fn run(&mut self, request: &RunRequest<'_>) -> Result<RunOutcome, RunnerError>;
}

/// Offline runner: outcomes come from a fixture keyed by tool name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureRunner {
    #[serde(default)]
    pub outcomes: HashMap<String, FixtureOutcome>,
    /// Verdict for tools missing from the fixture; `None` means unavailable.
    #[serde(default)]
    pub default_pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub passed: bool,
    #[serde(default)]
    pub output: String,
}

impl FixtureRunner {
    pub fn passing() -> Self {
        FixtureRunner {
            outcomes: HashMap::new(),
            default_pass: Some(true),
        }
    }

    pub fn with(mut self, tool: &str, passed: bool, output: &str) -> Self {
        self.outcomes.insert(
            tool.to_string(),
            FixtureOutcome {
                passed,
                output: output.to_string(),
            },
        );
        self
    }
}

impl TestRunner for FixtureRunner {
    fn run(&mut self, request: &RunRequest<'_>) -> Result<RunOutcome, RunnerError> {
        let (passed, output) = match self.outcomes.get(&request.tool.name) {
            Some(o) => (o.passed, o.output.clone()),
            None => match self.default_pass {
                Some(p) => (p, String::new()),
                None => {
                    return Err(RunnerError::Unavailable(format!(
                        "no fixture outcome for tool {}",
                        request.tool.name
                    )))
                }
            },
        };
        let (output, truncated) = cap(output.into_bytes(), request.output_cap);
        Ok(RunOutcome {
            passed,
            output,
            truncated,
        })
    }
}

/// Writes the tool code into the working directory and runs a command there.
/// Exit status 0 is a pass. `{script}` in the arguments is replaced by the
/// script file name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalProcessRunner {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_script")]
    pub script_name: String,
}

fn default_script() -> String {
    "tool_test.py".into()
}

impl TestRunner for LocalProcessRunner {
    fn run(&mut self, request: &RunRequest<'_>) -> Result<RunOutcome, RunnerError> {
        let io = |e: std::io::Error| RunnerError::Unavailable(e.to_string());
        std::fs::create_dir_all(&request.workdir).map_err(io)?;
        std::fs::write(request.workdir.join(&self.script_name), &request.tool.code).map_err(io)?;
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{script}", &self.script_name))
            .collect();
        let mut child = Command::new(&self.program)
            .args(&args)
            .current_dir(&request.workdir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", &request.workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(io)?;

        let cap_bytes = request.output_cap;
        let drain = |pipe: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                if let Some(mut p) = pipe {
                    // Keep one byte past the cap to detect truncation, then
                    // discard the rest so the child never blocks on a full pipe.
                    let _ = p.by_ref().take(cap_bytes as u64 + 1).read_to_end(&mut buf);
                    let _ = std::io::copy(&mut p, &mut std::io::sink());
                }
                buf
            })
        };
        let out = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let err = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(io)? {
                break status;
            }
            if start.elapsed() >= request.time_limit {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RunnerError::Timeout {
                    limit_ms: request.time_limit.as_millis() as u64,
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let mut bytes = out.join().unwrap_or_default();
        bytes.extend(err.join().unwrap_or_default());
        let (output, truncated) = cap(bytes, cap_bytes);
        Ok(RunOutcome {
            passed: status.success(),
            output,
            truncated,
        })
    }
}

fn cap(mut bytes: Vec<u8>, limit: usize) -> (String, bool) {
    let truncated = bytes.len() > limit;
    bytes.truncate(limit);
    (String::from_utf8_lossy(&bytes).into_owned(), truncated)
}
