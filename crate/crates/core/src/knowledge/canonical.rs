//! Canonical serialization: UTF-8 JSON, object keys sorted, no whitespace.
//! The content hash is the lowercase hex SHA-256 of these bytes and is itself
//! excluded from them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{InstructionEntry, KnowledgeState, ToolEntry, UserPreference};

// Keys in lexicographic order; the entry types already serialize sorted.
#[derive(Serialize)]
struct CanonicalState<'a> {
    instructions: &'a [InstructionEntry],
    preferences: &'a [UserPreference],
    schema_version: &'a str,
    tools: &'a [ToolEntry],
}

pub fn canonical_bytes(state: &KnowledgeState) -> Vec<u8> {
    let view = CanonicalState {
        instructions: &state.instructions,
        preferences: &state.preferences,
        schema_version: &state.schema_version,
        tools: &state.tools,
    };
    serde_json::to_vec(&view).expect("canonical state serializes")
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
