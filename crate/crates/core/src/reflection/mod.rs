//! Reflection: turning finished sessions into proposed knowledge deltas.
//!
//! Engines emit calls into a closed self-modification API; the control plane
//! parses those calls into typed deltas against the current state and never
//! interprets the rationale.

mod llm;
mod mock;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::knowledge::{
    apply_delta, digest_hex, is_identifier, Component, DeltaOp, EntryPayload, InstructionEntry,
    KnowledgeDelta, KnowledgeState, Origin, Proposer, Section, ToolEntry, ToolStatus,
    UserPreference,
};

pub use llm::{LlmConfig, LlmEngine};
pub use mock::{MockEngine, MockRule, RuleTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: &str) -> Self {
        Message {
            role: role.to_string(),
            content: content.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolLogEntry {
    pub tool: String,
    pub args_digest: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub transcript: Vec<Message>,
    #[serde(default)]
    pub tool_log: Vec<ToolLogEntry>,
    pub rating: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub state_commit: String,
    /// Digest of the ephemeral context, if one was supplied; the context
    /// itself is never stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ephemeral_digest: Option<String>,
    pub served_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated_at: Option<DateTime<Utc>>,
}

impl SessionRecord {
    /// Transcript with the input and output appended when the caller did not
    /// supply one.
    pub fn effective_transcript(&self) -> Vec<Message> {
        if self.transcript.is_empty() && !(self.input.is_empty() && self.output.is_empty()) {
            vec![
                Message::new("user", &self.input),
                Message::new("assistant", &self.output),
            ]
        } else {
            self.transcript.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    #[serde(rename = "appendInstruction")]
    AppendInstruction,
    #[serde(rename = "modifyInstruction")]
    ModifyInstruction,
    #[serde(rename = "createTool")]
    CreateTool,
    #[serde(rename = "deprecateTool")]
    DeprecateTool,
    #[serde(rename = "addUserPreference")]
    AddUserPreference,
}

impl Verb {
    pub const ALL: [Verb; 5] = [
        Verb::AppendInstruction,
        Verb::ModifyInstruction,
        Verb::CreateTool,
        Verb::DeprecateTool,
        Verb::AddUserPreference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::AppendInstruction => "appendInstruction",
            Verb::ModifyInstruction => "modifyInstruction",
            Verb::CreateTool => "createTool",
            Verb::DeprecateTool => "deprecateTool",
            Verb::AddUserPreference => "addUserPreference",
        }
    }

    pub fn required_arguments(self) -> &'static [&'static str] {
        match self {
            Verb::AppendInstruction => &["text"],
            Verb::ModifyInstruction => &["id"],
            Verb::CreateTool => &["name", "signature", "code"],
            Verb::DeprecateTool => &["name"],
            Verb::AddUserPreference => &["key", "value"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfModCall {
    pub verb: Verb,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

impl SelfModCall {
    pub fn new(verb: Verb, args: &[(&str, &str)]) -> Self {
        SelfModCall {
            verb,
            arguments: args
                .iter()
                .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
                .collect(),
        }
    }

    fn str_arg(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(Value::as_str)
    }

    /// Checks that every required argument is present as a string.
    pub fn check_arguments(&self) -> Result<(), String> {
        for key in self.verb.required_arguments() {
            if self.str_arg(key).is_none() {
                return Err(format!("{} needs string argument {key}", self.verb.as_str()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutput {
    pub calls: Vec<SelfModCall>,
    pub rationale: BTreeMap<String, Value>,
}

impl ReflectionOutput {
    pub fn no_op(engine: &str) -> Self {
        ReflectionOutput {
            calls: Vec::new(),
            rationale: BTreeMap::from([
                ("engine".to_string(), Value::from(engine)),
                ("summary".to_string(), Value::from("no-op")),
            ]),
        }
    }

    /// Structural validation applied to every engine's output.
    pub fn validate(&self) -> Result<(), String> {
        if self.rationale.is_empty() {
            return Err("rationale is empty".into());
        }
        self.calls.iter().try_for_each(SelfModCall::check_arguments)
    }
}

/// A human veto of an accepted change, fed back into later reflections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetoFlag {
    pub candidate_id: String,
    pub calls: Vec<SelfModCall>,
    pub vetoed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRequest {
    pub session_id: String,
    pub transcript: Vec<Message>,
    pub tool_log: Vec<ToolLogEntry>,
    pub rating_window: Vec<u8>,
    pub veto_flags: Vec<VetoFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRequest {
    pub candidate_id: String,
    pub failed_calls: Vec<SelfModCall>,
    pub mean_prev: f64,
    pub mean_new: f64,
    pub p_value: f64,
    pub rating_window: Vec<u8>,
    pub veto_flags: Vec<VetoFlag>,
}

/// Raw wire exchange with an external engine, kept for the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub output: ReflectionOutput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<Exchange>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReflectionError {
    #[error("reflection engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("reflection engine timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("unparseable reflection output: {reason}")]
    UnparseableOutput { reason: String, raw: String },
    #[error("reflection response exceeds {limit} bytes")]
    ResponseTooLarge { limit: usize },
}

/// Anything that can propose deltas. Implementations must be deterministic
/// for replay to hold only if they are the mock; external engines are
/// recorded in the event log instead.
pub trait ReflectionEngine: Send {
    fn name(&self) -> &str;
    fn reflect(&mut self, request: &ReflectionRequest) -> Result<Reflection, ReflectionError>;
    fn repair(&mut self, request: &RepairRequest) -> Result<Reflection, ReflectionError>;
}

/// Parses a raw engine response body into a validated output.
pub fn parse_output(raw: &str) -> Result<ReflectionOutput, ReflectionError> {
    let unparseable = |reason: String| ReflectionError::UnparseableOutput {
        reason,
        raw: raw.to_string(),
    };
    let output: ReflectionOutput =
        serde_json::from_str(raw).map_err(|e| unparseable(e.to_string()))?;
    output.validate().map_err(unparseable)?;
    Ok(output)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("call {index} ({verb}): unknown target {id}")]
    UnknownTargetId {
        index: usize,
        verb: &'static str,
        id: String,
    },
    #[error("call {index} ({verb}): {reason}")]
    MalformedArguments {
        index: usize,
        verb: &'static str,
        reason: String,
    },
}

/// Inputs the parser needs besides the calls themselves.
#[derive(Debug, Clone)]
pub struct ParseContext<'a> {
    pub now: DateTime<Utc>,
    pub proposer: Proposer,
    /// Mixed into generated instruction ids so that distinct candidates do
    /// not collide.
    pub id_salt: &'a str,
    pub rationale: BTreeMap<String, Value>,
}

/// Id given to the usage rubric instruction of a tool.
pub fn rubric_id(tool: &str) -> String {
    format!("rubric-{tool}")
}

/// Maps calls to ops in order. Later calls see the effect of earlier ones.
pub fn parse_self_mod_calls(
    calls: &[SelfModCall],
    current: &KnowledgeState,
    ctx: &ParseContext<'_>,
) -> Result<KnowledgeDelta, ParseError> {
    let origin = match ctx.proposer {
        Proposer::Reflection => Origin::Reflection,
        Proposer::Repair => Origin::Repair,
        Proposer::Manual => Origin::Manual,
    };
    let mut work = current.clone();
    let mut ops = Vec::new();
    for (index, call) in calls.iter().enumerate() {
        let verb = call.verb.as_str();
        let malformed = |reason: String| ParseError::MalformedArguments {
            index,
            verb,
            reason,
        };
        let unknown = |id: &str| ParseError::UnknownTargetId {
            index,
            verb,
            id: id.to_string(),
        };
        call.check_arguments().map_err(malformed)?;
        let created_at = match call.str_arg("created_at") {
            Some(s) => DateTime::parse_from_rfc3339(s)
                .map_err(|e| malformed(format!("created_at: {e}")))?
                .with_timezone(&Utc),
            None => ctx.now,
        };
        let section = match call.str_arg("section") {
            Some(s) => Some(Section::parse(s).ok_or_else(|| malformed(format!("section {s:?}")))?),
            None => None,
        };
        let arg = |k: &str| call.str_arg(k).unwrap_or_default().to_string();

        let new_ops = match call.verb {
            Verb::AppendInstruction => {
                let text = arg("text");
                let id = call.str_arg("id").map(str::to_string).unwrap_or_else(|| {
                    let seed = format!("{}:{index}:{text}", ctx.id_salt);
                    format!("ins-{}", &digest_hex(seed.as_bytes())[..12])
                });
                if work.instruction(&id).is_some() {
                    return Err(malformed(format!("instruction id {id} already exists")));
                }
                vec![DeltaOp::Insert {
                    entry: EntryPayload::S(InstructionEntry {
                        created_at,
                        id,
                        origin,
                        section: section.unwrap_or(Section::Global),
                        text,
                    }),
                    position: None,
                }]
            }
            Verb::ModifyInstruction => {
                let id = arg("id");
                let old = work.instruction(&id).ok_or_else(|| unknown(&id))?;
                let mut entry = old.clone();
                if let Some(text) = call.str_arg("text") {
                    entry.text = text.to_string();
                }
                if let Some(section) = section {
                    entry.section = section;
                }
                vec![DeltaOp::Modify {
                    target_id: id,
                    entry: EntryPayload::S(entry),
                }]
            }
            Verb::CreateTool => {
                let name = arg("name");
                if !is_identifier(&name) {
                    return Err(malformed(format!("tool name {name:?} is not an identifier")));
                }
                let entry = ToolEntry {
                    code: arg("code"),
                    created_at,
                    name: name.clone(),
                    sandbox_dir: call
                        .str_arg("sandbox_dir")
                        .map_or_else(|| name.clone(), str::to_string),
                    signature: arg("signature"),
                    status: ToolStatus::Quarantined,
                };
                let mut ops = Vec::new();
                match work.tool(&name) {
                    Some(t) if t.status == ToolStatus::Active => {
                        return Err(malformed(format!(
                            "tool {name} is active; deprecate it before re-creating"
                        )));
                    }
                    // A retired or quarantined tool of the same name is
                    // replaced by a fresh entry.
                    Some(t) => ops.push(DeltaOp::Delete {
                        component: Component::T,
                        target_id: name.clone(),
                        snapshot: Some(EntryPayload::T(t.clone())),
                    }),
                    None => {}
                }
                ops.push(DeltaOp::Insert {
                    entry: EntryPayload::T(entry),
                    position: None,
                });
                ops
            }
            Verb::DeprecateTool => {
                let name = arg("name");
                let tool = work.tool(&name).ok_or_else(|| unknown(&name))?;
                let mut entry = tool.clone();
                entry.status = ToolStatus::Deprecated;
                let mut ops = vec![DeltaOp::Modify {
                    target_id: name.clone(),
                    entry: EntryPayload::T(entry),
                }];
                if let Some(rubric) = work.instruction(&rubric_id(&name)) {
                    ops.push(DeltaOp::Delete {
                        component: Component::S,
                        target_id: rubric.id.clone(),
                        snapshot: Some(EntryPayload::S(rubric.clone())),
                    });
                }
                ops
            }
            Verb::AddUserPreference => {
                let key = arg("key");
                match work.preference(&key) {
                    Some(old) => vec![DeltaOp::Modify {
                        target_id: key.clone(),
                        entry: EntryPayload::U(UserPreference {
                            value: arg("value"),
                            ..old.clone()
                        }),
                    }],
                    None => vec![DeltaOp::Insert {
                        entry: EntryPayload::U(UserPreference {
                            created_at,
                            key,
                            value: arg("value"),
                        }),
                        position: None,
                    }],
                }
            }
        };
        let step = KnowledgeDelta::new(new_ops.clone(), Proposer::Manual);
        work = apply_delta(&work, &step).map_err(|e| malformed(e.to_string()))?;
        ops.extend(new_ops);
    }
    let mut delta = KnowledgeDelta::new(ops, ctx.proposer);
    delta.rationale = ctx.rationale.clone();
    Ok(delta)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("op {index} has no self-modification verb")]
pub struct RenderError {
    pub index: usize,
}

/// Renders a delta back into calls. Only deltas built from the verb set are
/// expressible.
pub fn render_calls(delta: &KnowledgeDelta) -> Result<Vec<SelfModCall>, RenderError> {
    let mut calls = Vec::new();
    let mut i = 0;
    let ops = &delta.ops;
    while i < ops.len() {
        let err = RenderError { index: i };
        let call = match &ops[i] {
            DeltaOp::Insert {
                entry: EntryPayload::S(e),
                position: None,
            } => args_call(
                Verb::AppendInstruction,
                &[
                    ("created_at", e.created_at.to_rfc3339()),
                    ("id", e.id.clone()),
                    ("section", e.section.as_str().into()),
                    ("text", e.text.clone()),
                ],
            ),
            DeltaOp::Modify {
                entry: EntryPayload::S(e),
                ..
            } => args_call(
                Verb::ModifyInstruction,
                &[
                    ("id", e.id.clone()),
                    ("section", e.section.as_str().into()),
                    ("text", e.text.clone()),
                ],
            ),
            DeltaOp::Delete {
                component: Component::T,
                target_id,
                ..
            } => {
                // Replacement of a retired tool: delete immediately followed
                // by the insert of the same name.
                match ops.get(i + 1) {
                    Some(DeltaOp::Insert {
                        entry: EntryPayload::T(t),
                        position: None,
                    }) if &t.name == target_id => {
                        i += 1;
                        create_tool_call(t)
                    }
                    _ => return Err(err),
                }
            }
            DeltaOp::Insert {
                entry: EntryPayload::T(t),
                position: None,
            } if t.status == ToolStatus::Quarantined => create_tool_call(t),
            DeltaOp::Modify {
                target_id,
                entry: EntryPayload::T(t),
            } if t.status == ToolStatus::Deprecated => {
                if let Some(DeltaOp::Delete {
                    component: Component::S,
                    target_id: rubric,
                    ..
                }) = ops.get(i + 1)
                {
                    if *rubric == rubric_id(target_id) {
                        i += 1;
                    }
                }
                args_call(Verb::DeprecateTool, &[("name", target_id.clone())])
            }
            DeltaOp::Insert {
                entry: EntryPayload::U(p),
                position: None,
            } => args_call(
                Verb::AddUserPreference,
                &[
                    ("created_at", p.created_at.to_rfc3339()),
                    ("key", p.key.clone()),
                    ("value", p.value.clone()),
                ],
            ),
            DeltaOp::Modify {
                entry: EntryPayload::U(p),
                ..
            } => args_call(
                Verb::AddUserPreference,
                &[("key", p.key.clone()), ("value", p.value.clone())],
            ),
            _ => return Err(err),
        };
        calls.push(call);
        i += 1;
    }
    Ok(calls)
}

fn create_tool_call(t: &ToolEntry) -> SelfModCall {
    args_call(
        Verb::CreateTool,
        &[
            ("code", t.code.clone()),
            ("created_at", t.created_at.to_rfc3339()),
            ("name", t.name.clone()),
            ("sandbox_dir", t.sandbox_dir.clone()),
            ("signature", t.signature.clone()),
        ],
    )
}

fn args_call(verb: Verb, args: &[(&str, String)]) -> SelfModCall {
    SelfModCall {
        verb,
        arguments: args
            .iter()
            .map(|(k, v)| (k.to_string(), Value::String(v.clone())))
            .collect(),
    }
}
