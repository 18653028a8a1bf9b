//! Deterministic rule-based reflection engine.

use std::collections::BTreeMap;

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;

use super::{
    Reflection, ReflectionEngine, ReflectionError, ReflectionOutput, ReflectionRequest,
    RepairRequest, SelfModCall, Verb,
};

/// One pattern and the call it produces. Argument templates may refer to
/// named or numbered capture groups (`${fact}`, `$1`).
#[derive(Debug, Clone)]
pub struct MockRule {
    pub name: String,
    pub pattern: Regex,
    /// Only messages with this role are scanned; `None` scans every message.
    pub role: Option<String>,
    pub verb: Verb,
    pub arguments: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RuleFile {
    #[serde(default)]
    repair_prefix: Option<String>,
    #[serde(default, rename = "rule")]
    rules: Vec<RuleSpec>,
}

#[derive(Deserialize)]
struct RuleSpec {
    name: String,
    pattern: String,
    #[serde(default = "default_role")]
    role: Option<String>,
    verb: Verb,
    #[serde(default)]
    arguments: BTreeMap<String, String>,
}

fn default_role() -> Option<String> {
    Some("user".into())
}

#[derive(Debug, Clone)]
pub struct RuleTable {
    pub rules: Vec<MockRule>,
    /// Prepended to instruction text when repairing a rejected change.
    pub repair_prefix: String,
}

const DEFAULT_RULES: &str = r#"
repair_prefix = "Clarification: "

[[rule]]
name = "correction"
pattern = '(?im)\bcorrection:\s*(?P<fact>\S.*?)\s*$'
verb = "appendInstruction"
arguments = { text = "${fact}", section = "global" }

[[rule]]
name = "revision"
pattern = '(?im)\brevise\s+(?P<id>[A-Za-z0-9_.-]+):\s*(?P<text>\S.*?)\s*$'
verb = "modifyInstruction"
arguments = { id = "${id}", text = "${text}" }

[[rule]]
name = "preference"
pattern = '(?im)\bpreference:\s*(?P<key>[A-Za-z0-9_.-]+)\s*=\s*(?P<value>\S.*?)\s*$'
verb = "addUserPreference"
arguments = { key = "${key}", value = "${value}" }

[[rule]]
name = "new-tool"
pattern = '(?im)\bnew tool:\s*(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*\((?P<params>[^)]*)\)\s*=>\s*(?P<code>\S.*?)\s*$'
verb = "createTool"
arguments = { name = "${name}", signature = "${name}(${params})", code = "${code}" }

[[rule]]
name = "retire-tool"
pattern = '(?im)\bdeprecate tool:\s*(?P<name>[A-Za-z_][A-Za-z0-9_]*)'
verb = "deprecateTool"
arguments = { name = "${name}" }
"#;

impl Default for RuleTable {
    fn default() -> Self {
        RuleTable::from_toml(DEFAULT_RULES).expect("built-in rule table parses")
    }
}

impl RuleTable {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: RuleFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let rules = file
            .rules
            .into_iter()
            .map(|r| {
                let pattern = Regex::new(&r.pattern)
                    .map_err(|e| format!("rule {}: bad pattern: {e}", r.name))?;
                Ok(MockRule {
                    name: r.name,
                    pattern,
                    role: r.role,
                    verb: r.verb,
                    arguments: r.arguments,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(RuleTable {
            rules,
            repair_prefix: file.repair_prefix.unwrap_or_else(|| "Clarification: ".into()),
        })
    }

    /// Pattern to calls, rules in table order, matches in transcript order.
    /// Calls identical to a vetoed call are suppressed.
    pub fn reflect(&self, request: &ReflectionRequest) -> ReflectionOutput {
        let vetoed: Vec<&SelfModCall> = request.veto_flags.iter().flat_map(|f| &f.calls).collect();
        let mut calls = Vec::new();
        let mut matched = Vec::new();
        let mut suppressed = 0usize;
        for rule in &self.rules {
            for msg in &request.transcript {
                if rule.role.as_deref().is_some_and(|r| r != msg.role) {
                    continue;
                }
                for caps in rule.pattern.captures_iter(&msg.content) {
                    let arguments = rule
                        .arguments
                        .iter()
                        .map(|(k, template)| {
                            let mut out = String::new();
                            caps.expand(template, &mut out);
                            (k.clone(), Value::String(out.trim().to_string()))
                        })
                        .collect();
                    let call = SelfModCall {
                        verb: rule.verb,
                        arguments,
                    };
                    if vetoed.iter().any(|v| strip_created(v) == strip_created(&call)) {
                        suppressed += 1;
                        continue;
                    }
                    if !matched.contains(&rule.name) {
                        matched.push(rule.name.clone());
                    }
                    calls.push(call);
                }
            }
        }
        if calls.is_empty() && suppressed == 0 {
            return ReflectionOutput::no_op("mock");
        }
        let mut rationale = BTreeMap::new();
        rationale.insert("engine".into(), Value::from("mock"));
        rationale.insert("matched_rules".into(), Value::from(matched));
        rationale.insert(
            "summary".into(),
            Value::from(if calls.is_empty() {
                "no-op (all matches previously vetoed)".to_string()
            } else {
                format!("{} call(s) proposed", calls.len())
            }),
        );
        rationale.insert("suppressed_by_veto".into(), Value::from(suppressed));
        if !request.rating_window.is_empty() {
            let mean = request.rating_window.iter().map(|&r| f64::from(r)).sum::<f64>()
                / request.rating_window.len() as f64;
            rationale.insert("window_mean".into(), Value::from(mean));
            rationale.insert(
                "score_delta".into(),
                Value::from(mean - crate::gate::PRIOR_MEAN),
            );
        }
        ReflectionOutput { calls, rationale }
    }

    /// Re-proposes the failed calls with clarified instruction text.
    pub fn repair(&self, request: &RepairRequest) -> ReflectionOutput {
        if request.failed_calls.is_empty() {
            return ReflectionOutput::no_op("mock");
        }
        let calls = request
            .failed_calls
            .iter()
            .map(|call| {
                let mut call = strip_created(call);
                if call.verb == Verb::AppendInstruction {
                    // Fresh ids: the repair lands on the base state.
                    call.arguments.remove("id");
                }
                if matches!(call.verb, Verb::AppendInstruction | Verb::ModifyInstruction) {
                    if let Some(Value::String(text)) = call.arguments.get_mut("text") {
                        if !text.starts_with(&self.repair_prefix) {
                            *text = format!("{}{}", self.repair_prefix, text);
                        }
                    }
                }
                call
            })
            .collect();
        let rationale = BTreeMap::from([
            ("engine".to_string(), Value::from("mock")),
            ("summary".to_string(), Value::from("repair of rejected change")),
            ("failed_candidate".to_string(), Value::from(request.candidate_id.clone())),
            ("p_value".to_string(), Value::from(request.p_value)),
            ("score_delta".to_string(), Value::from(request.mean_new - request.mean_prev)),
        ]);
        ReflectionOutput { calls, rationale }
    }
}

fn strip_created(call: &SelfModCall) -> SelfModCall {
    let mut c = call.clone();
    c.arguments.remove("created_at");
    c
}

/// [`RuleTable`] as a [`ReflectionEngine`].
#[derive(Debug, Clone, Default)]
pub struct MockEngine {
    pub table: RuleTable,
}

impl MockEngine {
    pub fn new(table: RuleTable) -> Self {
        MockEngine { table }
    }
}

impl ReflectionEngine for MockEngine {
    fn name(&self) -> &str {
        "mock"
    }

    fn reflect(&mut self, request: &ReflectionRequest) -> Result<Reflection, ReflectionError> {
        Ok(Reflection {
            output: self.table.reflect(request),
            exchange: None,
        })
    }

    fn repair(&mut self, request: &RepairRequest) -> Result<Reflection, ReflectionError> {
        Ok(Reflection {
            output: self.table.repair(request),
            exchange: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Message, VetoFlag};
    use super::*;
    use chrono::Utc;

    fn request(msgs: &[(&str, &str)]) -> ReflectionRequest {
        ReflectionRequest {
            session_id: "s1".into(),
            transcript: msgs.iter().map(|(r, c)| Message::new(r, c)).collect(),
            tool_log: vec![],
            rating_window: vec![2, 3],
            veto_flags: vec![],
        }
    }

    #[test]
    fn correction_becomes_append() {
        let out = RuleTable::default().reflect(&request(&[(
            "user",
            "No. Correction: php-fpm is exclusively for web traffic",
        )]));
        assert_eq!(
            out.calls,
            vec![SelfModCall::new(
                Verb::AppendInstruction,
                &[("text", "php-fpm is exclusively for web traffic"), ("section", "global")]
            )]
        );
        assert!(out.validate().is_ok());
    }

    #[test]
    fn empty_transcript_is_no_op() {
        let out = RuleTable::default().reflect(&request(&[]));
        assert!(out.calls.is_empty());
        assert_eq!(out.rationale["summary"], "no-op");
    }

    #[test]
    fn assistant_text_does_not_trigger() {
        let out = RuleTable::default().reflect(&request(&[("assistant", "correction: nope")]));
        assert!(out.calls.is_empty());
    }

    #[test]
    fn rule_order_breaks_ties() {
        let out = RuleTable::default().reflect(&request(&[(
            "user",
            "preference: tone = terse\ncorrection: use UTC",
        )]));
        let verbs: Vec<_> = out.calls.iter().map(|c| c.verb).collect();
        assert_eq!(verbs, vec![Verb::AppendInstruction, Verb::AddUserPreference]);
    }

    #[test]
    fn vetoed_calls_are_suppressed() {
        let mut req = request(&[("user", "correction: a b c")]);
        let first = RuleTable::default().reflect(&req);
        req.veto_flags.push(VetoFlag {
            candidate_id: "c1".into(),
            calls: first.calls.clone(),
            vetoed_at: Utc::now(),
        });
        let second = RuleTable::default().reflect(&req);
        assert!(second.calls.is_empty());
        assert_eq!(second.rationale["suppressed_by_veto"], 1);
    }

    #[test]
    fn deterministic() {
        let req = request(&[("user", "correction: x\nnew tool: add(a, b) => a + b")]);
        let t = RuleTable::default();
        assert_eq!(
            serde_json::to_vec(&t.reflect(&req)).unwrap(),
            serde_json::to_vec(&t.reflect(&req)).unwrap()
        );
    }

    #[test]
    fn repair_clarifies_text() {
        let req = RepairRequest {
            candidate_id: "c1".into(),
            failed_calls: vec![SelfModCall::new(
                Verb::AppendInstruction,
                &[("text", "x"), ("id", "ins-1")],
            )],
            mean_prev: 3.0,
            mean_new: 2.9,
            p_value: 0.7,
            rating_window: vec![],
            veto_flags: vec![],
        };
        let out = RuleTable::default().repair(&req);
        assert_eq!(out.calls[0].arguments["text"], "Clarification: x");
        assert!(!out.calls[0].arguments.contains_key("id"));
    }
}
