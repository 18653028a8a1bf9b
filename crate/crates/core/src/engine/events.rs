//! Event log: every input the engine consumed, plus the observations it
//! made of nondeterministic collaborators (reflection outputs, tool test
//! outcomes). Replaying the log through a fresh engine reproduces its
//! commits, decisions and budget values exactly.
//!
//! File format: NDJSON, one `{"seq": n, ...event}` record per line, with the
//! event tagged by `"event"`.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::knowledge::{KnowledgeDelta, KnowledgeState};
use crate::reflection::{
    Reflection, ReflectionEngine, ReflectionError, ReflectionOutput, ReflectionRequest,
    RepairRequest, SelfModCall, SessionRecord,
};
use crate::tools::{RunOutcome, RunRequest, RunnerError, TestRunner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    Genesis {
        at: DateTime<Utc>,
        state: KnowledgeState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<super::EngineConfig>,
    },
    Session {
        at: DateTime<Utc>,
        session: SessionRecord,
    },
    Rating {
        at: DateTime<Utc>,
        session_id: String,
        rating: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        comment: Option<String>,
        submitter: String,
    },
    Veto {
        at: DateTime<Utc>,
        candidate_id: String,
        actor: String,
    },
    Revert {
        at: DateTime<Utc>,
        reference: String,
        actor: String,
    },
    Tick {
        at: DateTime<Utc>,
    },
    /// A candidate proposed directly rather than through reflection.
    Propose {
        at: DateTime<Utc>,
        delta: KnowledgeDelta,
        calls: Vec<SelfModCall>,
    },
    /// Observation: what the reflection engine answered for a session.
    Reflected {
        session_id: String,
        result: Result<ReflectionOutput, ReflectionError>,
    },
    /// Observation: what the reflection engine answered to a repair request.
    Repaired {
        candidate_id: String,
        result: Result<ReflectionOutput, ReflectionError>,
    },
    /// Observation: outcome of a tool's test scaffold.
    ToolRun {
        tool: String,
        result: Result<RunOutcome, RunnerError>,
    },
}

impl EngineEvent {
    pub fn is_observation(&self) -> bool {
        matches!(
            self,
            EngineEvent::Reflected { .. } | EngineEvent::Repaired { .. } | EngineEvent::ToolRun { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: EngineEvent,
}

#[derive(Debug)]
enum Sink {
    Memory(Vec<LoggedEvent>),
    File { path: PathBuf, file: File },
    Discard,
}

#[derive(Debug)]
pub struct EventLog {
    sink: Sink,
    next_seq: u64,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            sink: Sink::Memory(Vec::new()),
            next_seq: 1,
        }
    }

    pub fn discard() -> Self {
        EventLog {
            sink: Sink::Discard,
            next_seq: 1,
        }
    }

    /// Appends to `path`, continuing after the records already there.
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let existing = if path.exists() { read_events(path)?.len() as u64 } else { 0 };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            sink: Sink::File {
                path: path.to_path_buf(),
                file,
            },
            next_seq: existing + 1,
        })
    }

    pub fn record(&mut self, event: EngineEvent) -> std::io::Result<()> {
        let logged = LoggedEvent {
            seq: self.next_seq,
            event,
        };
        self.next_seq += 1;
        match &mut self.sink {
            Sink::Memory(v) => v.push(logged),
            Sink::File { file, .. } => {
                let mut line = serde_json::to_vec(&logged).expect("event serializes");
                line.push(b'\n');
                file.write_all(&line)?;
            }
            Sink::Discard => {}
        }
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorded events; a discarding log has none.
    pub fn events(&self) -> std::io::Result<Vec<EngineEvent>> {
        match &self.sink {
            Sink::Memory(v) => Ok(v.iter().map(|l| l.event.clone()).collect()),
            Sink::File { path, .. } => read_events(path),
            Sink::Discard => Ok(Vec::new()),
        }
    }
}

/// Reads an event log file. A final line cut short by a crash is skipped.
pub fn read_events(path: &Path) -> std::io::Result<Vec<EngineEvent>> {
    let text = std::fs::read_to_string(path)?;
    let terminated = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<LoggedEvent>(line) {
            Ok(l) => out.push(l.event),
            Err(_) if i + 1 == lines.len() && !terminated => break,
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("event log line {}: {e}", i + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Reflection engine that answers from recorded observations.
#[derive(Debug, Default)]
pub struct ScriptedReflector {
    reflections: VecDeque<(String, Result<ReflectionOutput, ReflectionError>)>,
    repairs: VecDeque<(String, Result<ReflectionOutput, ReflectionError>)>,
}

/// Test runner that answers from recorded observations.
#[derive(Debug, Default)]
pub struct ScriptedRunner {
    runs: VecDeque<(String, Result<RunOutcome, RunnerError>)>,
}

/// Every session in the log with its rating applied, in log order. Unlike
/// the engine, which keeps a bounded number of sessions, this sees them all.
pub fn sessions_from_events(events: &[EngineEvent]) -> Vec<SessionRecord> {
    let mut order = Vec::new();
    let mut by_id: std::collections::HashMap<&str, SessionRecord> = std::collections::HashMap::new();
    for e in events {
        match e {
            EngineEvent::Session { session, .. } => {
                order.push(session.id.as_str());
                by_id.insert(session.id.as_str(), session.clone());
            }
            EngineEvent::Rating {
                session_id,
                rating,
                comment,
                ..
            } => {
                if let Some(s) = by_id.get_mut(session_id.as_str()).filter(|s| s.rating.is_none()) {
                    s.rating = Some(*rating);
                    s.comment = comment.clone();
                }
            }
            _ => {}
        }
    }
    order.into_iter().filter_map(|id| by_id.remove(id)).collect()
}

pub fn scripted_collaborators(events: &[EngineEvent]) -> (ScriptedReflector, ScriptedRunner) {
    let mut reflector = ScriptedReflector::default();
    let mut runner = ScriptedRunner::default();
    for e in events {
        match e {
            EngineEvent::Reflected { session_id, result } => {
                reflector.reflections.push_back((session_id.clone(), result.clone()))
            }
            EngineEvent::Repaired {
                candidate_id,
                result,
            } => reflector.repairs.push_back((candidate_id.clone(), result.clone())),
            EngineEvent::ToolRun { tool, result } => {
                runner.runs.push_back((tool.clone(), result.clone()))
            }
            _ => {}
        }
    }
    (reflector, runner)
}

fn replay_mismatch(what: &str, want: &str, got: Option<&str>) -> ReflectionError {
    ReflectionError::EngineUnavailable(format!(
        "replay diverged: {what} for {want}, log has {}",
        got.unwrap_or("nothing")
    ))
}

impl ReflectionEngine for ScriptedReflector {
    fn name(&self) -> &str {
        "replay"
    }

    fn reflect(&mut self, request: &ReflectionRequest) -> Result<Reflection, ReflectionError> {
        match self.reflections.front() {
            Some((id, _)) if *id == request.session_id => {
                let (_, result) = self.reflections.pop_front().expect("front exists");
                result.map(|output| Reflection {
                    output,
                    exchange: None,
                })
            }
            other => Err(replay_mismatch(
                "reflection",
                &request.session_id,
                other.map(|(id, _)| id.as_str()),
            )),
        }
    }

    fn repair(&mut self, request: &RepairRequest) -> Result<Reflection, ReflectionError> {
        match self.repairs.front() {
            Some((id, _)) if *id == request.candidate_id => {
                let (_, result) = self.repairs.pop_front().expect("front exists");
                result.map(|output| Reflection {
                    output,
                    exchange: None,
                })
            }
            other => Err(replay_mismatch(
                "repair",
                &request.candidate_id,
                other.map(|(id, _)| id.as_str()),
            )),
        }
    }
}

impl TestRunner for ScriptedRunner {
    fn run(&mut self, request: &RunRequest<'_>) -> Result<RunOutcome, RunnerError> {
        match self.runs.front() {
            Some((tool, _)) if *tool == request.tool.name => {
                self.runs.pop_front().expect("front exists").1
            }
            other => Err(RunnerError::Unavailable(format!(
                "replay diverged: tool run for {}, log has {}",
                request.tool.name,
                other.map_or("nothing", |(t, _)| t.as_str())
            ))),
        }
    }
}
