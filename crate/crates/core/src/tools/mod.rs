//! Tool lifecycle: policy scan, path validation, the unit-test gate and
//! usage rubrics.
//!
//! A created tool enters T quarantined. [`register_tool`] scans it, runs its
//! test scaffold through a [`TestRunner`] inside its sandbox directory and
//! either proposes activation (status change plus a rubric instruction in S)
//! or keeps it quarantined and writes the failure to `failure.diff`.

pub mod policy;
pub mod runner;

use std::path::PathBuf;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{DeltaOp, KnowledgeDelta, Proposer};
use crate::knowledge::{
    EntryPayload, InstructionEntry, KnowledgeState, Origin, Section, ToolEntry, ToolStatus,
};
use crate::reflection::{parse_self_mod_calls, rubric_id, ParseContext, ParseError, SelfModCall, Verb};

pub use policy::{scan_tool, validate_path, Denylist, PathViolation, PolicyReport};
pub use runner::{FixtureRunner, LocalProcessRunner, RunOutcome, RunRequest, RunnerError, TestRunner};

pub const FAILURE_FILE: &str = "failure.diff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolPolicy {
    pub sandbox_root: PathBuf,
    pub denylist: Denylist,
    pub time_limit_ms: u64,
    pub output_cap_bytes: usize,
}

impl Default for ToolPolicy {
    fn default() -> Self {
        ToolPolicy {
            sandbox_root: PathBuf::from("sandbox"),
            denylist: Denylist::default(),
            time_limit_ms: 10_000,
            output_cap_bytes: 64 * 1024,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ToolError {
    #[error("tool {name} failed the policy scan")]
    PolicyNotPassed { name: String, report: PolicyReport },
    #[error("tool {name}: bad sandbox directory: {violation}")]
    BadSandbox { name: String, violation: PathViolation },
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("tool {0} is not awaiting registration")]
    NotQuarantined(String),
    #[error("test runner unavailable: {0}")]
    RunnerUnavailable(String),
    #[error("tool test exceeded {limit_ms} ms")]
    TestTimeout { limit_ms: u64 },
    #[error("sandbox io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Registration {
    /// Test passed; applying `delta` activates the tool and adds its rubric.
    Activated { delta: KnowledgeDelta, output: String },
    /// Test failed; the tool stays quarantined.
    Quarantined { failure_diff: String, diff_path: PathBuf },
}

pub fn rubric_text(tool: &ToolEntry) -> String {
    format!(
        "Call {} as {} when a request needs it; pass only relative file names.",
        tool.name, tool.signature
    )
}

pub fn sandbox_path(policy: &ToolPolicy, tool: &ToolEntry) -> Result<PathBuf, ToolError> {
    let rel = validate_path(&tool.sandbox_dir, &policy.sandbox_root).map_err(|violation| {
        ToolError::BadSandbox {
            name: tool.name.clone(),
            violation,
        }
    })?;
    Ok(policy.sandbox_root.join(rel))
}

/// Runs the unit-test gate for a quarantined tool already present in `state`.
pub fn register_tool(
    state: &KnowledgeState,
    name: &str,
    runner: &mut dyn TestRunner,
    policy: &ToolPolicy,
    now: DateTime<Utc>,
) -> Result<Registration, ToolError> {
    let tool = state
        .tool(name)
        .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
    if tool.status != ToolStatus::Quarantined {
        return Err(ToolError::NotQuarantined(name.to_string()));
    }
    let report = scan_tool(&tool.code, &[&tool.sandbox_dir], &policy.denylist);
    if !report.passed {
        return Err(ToolError::PolicyNotPassed {
            name: name.to_string(),
            report,
        });
    }
    let workdir = sandbox_path(policy, tool)?;
    std::fs::create_dir_all(&workdir).map_err(|e| ToolError::Io(e.to_string()))?;
    let request = RunRequest {
        tool,
        workdir: workdir.clone(),
        time_limit: Duration::from_millis(policy.time_limit_ms),
        output_cap: policy.output_cap_bytes,
    };
    let outcome = runner.run(&request).map_err(|e| match e {
        RunnerError::Unavailable(m) => ToolError::RunnerUnavailable(m),
        RunnerError::Timeout { limit_ms } => ToolError::TestTimeout { limit_ms },
    })?;

    if outcome.passed {
        let mut active = tool.clone();
        active.status = ToolStatus::Active;
        let mut ops = vec![DeltaOp::Modify {
            target_id: name.to_string(),
            entry: EntryPayload::T(active),
        }];
        let rubric = InstructionEntry {
            created_at: now,
            id: rubric_id(name),
            origin: Origin::ToolRubric,
            section: Section::Global,
            text: rubric_text(tool),
        };
        ops.push(match state.instruction(&rubric.id) {
            Some(_) => DeltaOp::Modify {
                target_id: rubric.id.clone(),
                entry: EntryPayload::S(rubric),
            },
            None => DeltaOp::Insert {
                entry: EntryPayload::S(rubric),
                position: None,
            },
        });
        let delta = KnowledgeDelta::new(ops, Proposer::Manual)
            .with_rationale("kind", "tool_activation")
            .with_rationale("tool", name);
        return Ok(Registration::Activated {
            delta,
            output: outcome.output,
        });
    }

    let failure_diff = failure_diff(tool, &outcome, now);
    let diff_path = workdir.join(FAILURE_FILE);
    std::fs::write(&diff_path, &failure_diff).map_err(|e| ToolError::Io(e.to_string()))?;
    Ok(Registration::Quarantined {
        failure_diff,
        diff_path,
    })
}

fn failure_diff(tool: &ToolEntry, outcome: &RunOutcome, at: DateTime<Utc>) -> String {
    let mut out = format!(
        "--- expected: {} passes its test scaffold\n+++ actual: failed at {}\n",
        tool.signature,
        at.to_rfc3339()
    );
    for line in outcome.output.lines() {
        out.push_str("+ ");
        out.push_str(line);
        out.push('\n');
    }
    if outcome.truncated {
        out.push_str("+ [output truncated]\n");
    }
    out
}

/// Reads back the retained failure diff of a quarantined tool, if any.
pub fn read_failure_diff(policy: &ToolPolicy, tool: &ToolEntry) -> Option<String> {
    let dir = sandbox_path(policy, tool).ok()?;
    std::fs::read_to_string(dir.join(FAILURE_FILE)).ok()
}

/// Delta that deprecates `name` and removes its rubric from S.
pub fn deprecate_tool(
    state: &KnowledgeState,
    name: &str,
    now: DateTime<Utc>,
) -> Result<KnowledgeDelta, ToolError> {
    let call = SelfModCall::new(Verb::DeprecateTool, &[("name", name)]);
    let ctx = ParseContext {
        now,
        proposer: Proposer::Manual,
        id_salt: "deprecate",
        rationale: Default::default(),
    };
    parse_self_mod_calls(&[call], state, &ctx)
        .map(|d| d.with_rationale("kind", "tool_deprecation"))
        .map_err(|e| match e {
            ParseError::UnknownTargetId { id, .. } => ToolError::UnknownTool(id),
            other => ToolError::UnknownTool(other.to_string()),
        })
}

/// Names of tools inserted as quarantined by `delta`, in op order.
pub fn created_tools(delta: &KnowledgeDelta) -> Vec<String> {
    delta
        .ops
        .iter()
        .filter_map(|op| match op {
            DeltaOp::Insert {
                entry: EntryPayload::T(t),
                ..
            } if t.status == ToolStatus::Quarantined => Some(t.name.clone()),
            _ => None,
        })
        .collect()
}
