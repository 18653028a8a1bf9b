//! Knowledge state `K = (S, U, T)`: instructions, user preferences and the
//! tool registry, plus the typed delta algebra that edits it.
//!
//! States are immutable values. Every state carries the SHA-256 digest of its
//! canonical serialization, which is the identity used by the commit store,
//! the serving path and the mock backbone.

mod canonical;
mod delta;
mod diff;
mod prompt;

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{canonical_bytes, digest_hex};
pub use delta::{
    apply_delta, delta_size, invert_delta, DeltaError, DeltaOp, KnowledgeDelta, Proposer,
};
pub use diff::{diff_states, ComponentDiff, StateDiff};
pub use prompt::{compose_prompt, ComposedPrompt, PROMPT_HEADER};

/// Schema version written first in every persisted state document.
pub const SCHEMA_VERSION: &str = "1.0.0";

/// Whitespace-delimited token count; the size metric used for delta sizes,
/// budgets and prompt length.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    S,
    U,
    T,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::S => "S",
            Component::U => "U",
            Component::T => "T",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Global,
    Product,
    Tenant,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Global, Section::Product, Section::Tenant];

    pub fn parse(s: &str) -> Option<Section> {
        match s {
            "global" => Some(Section::Global),
            "product" => Some(Section::Product),
            "tenant" => Some(Section::Tenant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Global => "global",
            Section::Product => "product",
            Section::Tenant => "tenant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Reflection,
    Repair,
    Manual,
    ToolRubric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Active,
    Quarantined,
    Deprecated,
}

// Entry structs declare their fields in lexicographic order: serde emits
// fields in declaration order, so the derived serialization is already the
// canonical (sorted-key) form.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionEntry {
    pub created_at: DateTime<Utc>,
    pub id: String,
    pub origin: Origin,
    pub section: Section,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPreference {
    pub created_at: DateTime<Utc>,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEntry {
    pub code: String,
    pub created_at: DateTime<Utc>,
    pub name: String,
    pub sandbox_dir: String,
    pub signature: String,
    pub status: ToolStatus,
}

/// Common behaviour of the three entry kinds.
pub trait Entry: Clone + PartialEq {
    const COMPONENT: Component;

    /// Identifier unique within the entry's component.
    fn key(&self) -> &str;

    /// The text counted by [`delta_size`].
    fn sized_text(&self) -> &str;

    fn validate(&self) -> Result<(), String>;

    fn into_payload(self) -> EntryPayload;
}

impl Entry for InstructionEntry {
    const COMPONENT: Component = Component::S;

    fn key(&self) -> &str {
        &self.id
    }

    fn sized_text(&self) -> &str {
        &self.text
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("instruction id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("instruction {} has empty text", self.id));
        }
        Ok(())
    }

    fn into_payload(self) -> EntryPayload {
        EntryPayload::S(self)
    }
}

impl Entry for UserPreference {
    const COMPONENT: Component = Component::U;

    fn key(&self) -> &str {
        &self.key
    }

    fn sized_text(&self) -> &str {
        &self.value
    }

    fn validate(&self) -> Result<(), String> {
        if self.key.trim().is_empty() {
            return Err("preference key is empty".into());
        }
        Ok(())
    }

    fn into_payload(self) -> EntryPayload {
        EntryPayload::U(self)
    }
}

impl Entry for ToolEntry {
    const COMPONENT: Component = Component::T;

    fn key(&self) -> &str {
        &self.name
    }

    fn sized_text(&self) -> &str {
        &self.code
    }

    fn validate(&self) -> Result<(), String> {
        if !is_identifier(&self.name) {
            return Err(format!("tool name {:?} is not an identifier", self.name));
        }
        check_relative_dir(&self.sandbox_dir)
            .map_err(|e| format!("tool {}: sandbox_dir {e}", self.name))
    }

    fn into_payload(self) -> EntryPayload {
        EntryPayload::T(self)
    }
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn check_relative_dir(dir: &str) -> Result<(), String> {
    if dir.is_empty() {
        return Err("is empty".into());
    }
    if dir.starts_with('/') || dir.starts_with('\\') || dir.contains(':') {
        return Err("is absolute".into());
    }
    if dir.split(['/', '\\']).any(|seg| seg == "..") {
        return Err("contains a traversal segment".into());
    }
    Ok(())
}

/// An entry tagged with the component it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "component", content = "payload")]
pub enum EntryPayload {
    S(InstructionEntry),
    U(UserPreference),
    T(ToolEntry),
}

impl EntryPayload {
    pub fn component(&self) -> Component {
        match self {
            EntryPayload::S(_) => Component::S,
            EntryPayload::U(_) => Component::U,
            EntryPayload::T(_) => Component::T,
        }
    }

    pub fn key(&self) -> &str {
        match self {
            EntryPayload::S(e) => e.key(),
            EntryPayload::U(e) => e.key(),
            EntryPayload::T(e) => e.key(),
        }
    }

    pub fn sized_text(&self) -> &str {
        match self {
            EntryPayload::S(e) => e.sized_text(),
            EntryPayload::U(e) => e.sized_text(),
            EntryPayload::T(e) => e.sized_text(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            EntryPayload::S(e) => e.validate(),
            EntryPayload::U(e) => e.validate(),
            EntryPayload::T(e) => e.validate(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("content hash mismatch: document says {stated}, canonical bytes hash to {computed}")]
    HashMismatch { stated: String, computed: String },
    #[error("duplicate {component} id {id}")]
    DuplicateId { component: Component, id: String },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(String),
}

/// The versioned triple `(S, U, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StateDocument", into = "StateDocument")]
pub struct KnowledgeState {
    schema_version: String,
    instructions: Vec<InstructionEntry>,
    preferences: Vec<UserPreference>,
    tools: Vec<ToolEntry>,
    content_hash: String,
}

/// Persisted document shape: `schema_version` first, `content_hash` last.
#[derive(Serialize, Deserialize)]
struct StateDocument {
    schema_version: String,
    instructions: Vec<InstructionEntry>,
    preferences: Vec<UserPreference>,
    tools: Vec<ToolEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_hash: Option<String>,
}

impl TryFrom<StateDocument> for KnowledgeState {
    type Error = StateError;

    fn try_from(doc: StateDocument) -> Result<Self, Self::Error> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(StateError::UnsupportedSchema(doc.schema_version));
        }
        let state = KnowledgeState::new(doc.instructions, doc.preferences, doc.tools)?;
        match doc.content_hash {
            Some(stated) if stated != state.content_hash => Err(StateError::HashMismatch {
                stated,
                computed: state.content_hash,
            }),
            _ => Ok(state),
        }
    }
}

impl From<KnowledgeState> for StateDocument {
    fn from(s: KnowledgeState) -> Self {
        StateDocument {
            schema_version: s.schema_version,
            instructions: s.instructions,
            preferences: s.preferences,
            tools: s.tools,
            content_hash: Some(s.content_hash),
        }
    }
}

impl Default for KnowledgeState {
    fn default() -> Self {
        KnowledgeState::empty()
    }
}

impl KnowledgeState {
    pub fn empty() -> Self {
        Self::from_parts_unchecked(Vec::new(), Vec::new(), Vec::new())
    }

    /// Builds a state, checking entry invariants and id uniqueness.
    pub fn new(
        instructions: Vec<InstructionEntry>,
        preferences: Vec<UserPreference>,
        tools: Vec<ToolEntry>,
    ) -> Result<Self, StateError> {
        check_component(&instructions)?;
        check_component(&preferences)?;
        check_component(&tools)?;
        Ok(Self::from_parts_unchecked(instructions, preferences, tools))
    }

    pub(crate) fn from_parts_unchecked(
        instructions: Vec<InstructionEntry>,
        preferences: Vec<UserPreference>,
        tools: Vec<ToolEntry>,
    ) -> Self {
        let mut state = KnowledgeState {
            schema_version: SCHEMA_VERSION.to_string(),
            instructions,
            preferences,
            tools,
            content_hash: String::new(),
        };
        state.content_hash = digest_hex(&canonical_bytes(&state));
        state
    }

    pub fn schema_version(&self) -> &str {
        &self.schema_version
    }

    pub fn instructions(&self) -> &[InstructionEntry] {
        &self.instructions
    }

    pub fn preferences(&self) -> &[UserPreference] {
        &self.preferences
    }

    pub fn tools(&self) -> &[ToolEntry] {
        &self.tools
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn instruction(&self, id: &str) -> Option<&InstructionEntry> {
        self.instructions.iter().find(|e| e.id == id)
    }

    pub fn preference(&self, key: &str) -> Option<&UserPreference> {
        self.preferences.iter().find(|e| e.key == key)
    }

    pub fn tool(&self, name: &str) -> Option<&ToolEntry> {
        self.tools.iter().find(|e| e.name == name)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(self)
    }

    /// Pretty persisted document (schema_version first).
    pub fn to_document_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

fn check_component<E: Entry>(entries: &[E]) -> Result<(), StateError> {
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for e in entries {
        e.validate().map_err(StateError::InvalidEntry)?;
        if !seen.insert(e.key()) {
            return Err(StateError::DuplicateId {
                component: E::COMPONENT,
                id: e.key().to_string(),
            });
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn empty_state_hash_is_stable() {
        let a = KnowledgeState::empty();
        let b = KnowledgeState::new(vec![], vec![], vec![]).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn document_round_trip_preserves_hash() {
        let s = KnowledgeState::new(
            vec![instruction("i1", Section::Global, "php-fpm serves web traffic")],
            vec![preference("tone", "terse")],
            vec![tool("adder", "result = a + b", ToolStatus::Active)],
        )
        .unwrap();
        let doc = s.to_document_json();
        assert!(doc.trim_start().starts_with("{\n  \"schema_version\""));
        let back = KnowledgeState::from_json(doc.as_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn tampered_document_is_rejected() {
        let s = KnowledgeState::new(vec![instruction("i1", Section::Global, "a b")], vec![], vec![])
            .unwrap();
        let doc = s.to_document_json().replace("a b", "a c");
        let err = KnowledgeState::from_json(doc.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("content hash mismatch"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = KnowledgeState::new(
            vec![
                instruction("i1", Section::Global, "x"),
                instruction("i1", Section::Tenant, "y"),
            ],
            vec![],
            vec![],
        )
        .unwrap_err();
        assert_eq!(
            err,
            StateError::DuplicateId {
                component: Component::S,
                id: "i1".into()
            }
        );
    }

    #[test]
    fn tool_sandbox_dir_must_be_relative() {
        let mut t = tool("t", "x", ToolStatus::Quarantined);
        t.sandbox_dir = "../escape".into();
        assert!(KnowledgeState::new(vec![], vec![], vec![t.clone()]).is_err());
        t.sandbox_dir = "/abs".into();
        assert!(KnowledgeState::new(vec![], vec![], vec![t]).is_err());
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("_a1"));
        assert!(!is_identifier("1a"));
        assert!(!is_identifier("a-b"));
        assert!(!is_identifier(""));
    }
}
