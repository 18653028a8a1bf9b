use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{token_count, KnowledgeState, Origin, Section, ToolStatus, SCHEMA_VERSION};

pub const PROMPT_HEADER: &str = "# Operating knowledge (schema 1.0.0)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub text: String,
    pub tokens: usize,
    pub budget_tokens: usize,
    pub over_budget: bool,
    pub state_hash: String,
}

impl ComposedPrompt {
    /// The prompt for one session: the composed state followed by the
    /// session's ephemeral context, which is never persisted.
    pub fn with_ephemeral(&self, context: Option<&str>) -> String {
        match context {
            Some(c) if !c.trim().is_empty() => {
                format!("{}\n\n## Session context\n{}", self.text, c.trim_end())
            }
            _ => self.text.clone(),
        }
    }
}

/// Renders the state as a system prompt. Sections come in a fixed order
/// (global, product, tenant, preferences, tools) and empty ones are omitted.
pub fn compose_prompt(state: &KnowledgeState, budget_tokens: usize) -> ComposedPrompt {
    debug_assert_eq!(state.schema_version(), SCHEMA_VERSION);
    let mut text = String::from(PROMPT_HEADER);

    for section in Section::ALL {
        let mut lines = state
            .instructions()
            .iter()
            .filter(|e| e.section == section && e.origin != Origin::ToolRubric)
            .peekable();
        if lines.peek().is_none() {
            continue;
        }
        let title = match section {
            Section::Global => "Global instructions",
            Section::Product => "Product instructions",
            Section::Tenant => "Tenant instructions",
        };
        let _ = write!(text, "\n\n## {title}");
        for e in lines {
            let _ = write!(text, "\n- {}", e.text);
        }
    }

    if !state.preferences().is_empty() {
        text.push_str("\n\n## User preferences");
        for p in state.preferences() {
            let _ = write!(text, "\n- {}: {}", p.key, p.value);
        }
    }

    let mut tools = state
        .tools()
        .iter()
        .filter(|t| t.status == ToolStatus::Active)
        .peekable();
    let mut rubrics = state
        .instructions()
        .iter()
        .filter(|e| e.origin == Origin::ToolRubric)
        .peekable();
    if tools.peek().is_some() || rubrics.peek().is_some() {
        text.push_str("\n\n## Tools");
        for t in tools {
            let _ = write!(text, "\n- {}: {}", t.name, t.signature);
        }
        if rubrics.peek().is_some() {
            text.push_str("\nUsage:");
            for r in rubrics {
                let _ = write!(text, "\n- {}", r.text);
            }
        }
    }

    let tokens = token_count(&text);
    ComposedPrompt {
        tokens,
        budget_tokens,
        over_budget: tokens > budget_tokens,
        state_hash: state.content_hash().to_string(),
        text,
    }
}
