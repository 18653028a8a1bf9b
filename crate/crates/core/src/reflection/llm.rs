//! Client for an external reflection service.
//!
//! Wire format: `POST <endpoint>` with JSON
//! `{"kind": "reflect"|"repair", "schema_version": "1", "verbs": [...], "request": {...}}`
//! where `request` is a [`ReflectionRequest`] or [`RepairRequest`]. The
//! response body must be a [`ReflectionOutput`](super::ReflectionOutput).

use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    parse_output, Exchange, Reflection, ReflectionEngine, ReflectionError, ReflectionRequest,
    RepairRequest, Verb,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub max_response_bytes: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: String::new(),
            token_env: None,
            timeout_ms: 30_000,
            retries: 2,
            max_response_bytes: 256 * 1024,
        }
    }
}

pub struct LlmEngine {
    config: LlmConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl LlmEngine {
    pub fn new(config: LlmConfig) -> Result<Self, ReflectionError> {
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ReflectionError::EngineUnavailable(format!("credential variable {var} is unset"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ReflectionError::EngineUnavailable(e.to_string()))?;
        Ok(LlmEngine {
            config,
            token,
            client,
        })
    }

    fn call(&self, kind: &str, request: serde_json::Value) -> Result<Reflection, ReflectionError> {
        let verbs: Vec<&str> = Verb::ALL.iter().map(|v| v.as_str()).collect();
        let body = json!({
            "kind": kind,
            "schema_version": "1",
            "verbs": verbs,
            "request": request,
        })
        .to_string();

        let attempts = self.config.retries + 1;
        let mut last = ReflectionError::EngineUnavailable("no attempt made".into());
        for _ in 0..attempts {
            match self.attempt(&body) {
                Ok(raw) => {
                    let output = parse_output(&raw)?;
                    return Ok(Reflection {
                        output,
                        exchange: Some(Exchange {
                            request: body,
                            response: raw,
                        }),
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => last = e,
            }
        }
        Err(match last {
            ReflectionError::Timeout { .. } => ReflectionError::Timeout { attempts },
            other => other,
        })
    }

    fn attempt(&self, body: &str) -> Result<String, Attempt> {
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                ReflectionError::Timeout { attempts: 1 }
            } else {
                ReflectionError::EngineUnavailable(e.to_string())
            })
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(ReflectionError::EngineUnavailable(format!(
                "engine answered {status}"
            ))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ReflectionError::EngineUnavailable(format!(
                "engine answered {status}"
            ))));
        }
        let limit = self.config.max_response_bytes;
        if resp.content_length().is_some_and(|n| n as usize > limit) {
            return Err(Attempt::Fatal(ReflectionError::ResponseTooLarge { limit }));
        }
        let mut raw = Vec::new();
        resp.take(limit as u64 + 1)
            .read_to_end(&mut raw)
            .map_err(|e| {
                Attempt::Retry(if e.kind() == std::io::ErrorKind::TimedOut {
                    ReflectionError::Timeout { attempts: 1 }
                } else {
                    ReflectionError::EngineUnavailable(e.to_string())
                })
            })?;
        if raw.len() > limit {
            return Err(Attempt::Fatal(ReflectionError::ResponseTooLarge { limit }));
        }
        String::from_utf8(raw).map_err(|e| {
            Attempt::Fatal(ReflectionError::UnparseableOutput {
                reason: e.to_string(),
                raw: String::from_utf8_lossy(e.as_bytes()).into_owned(),
            })
        })
    }
}

enum Attempt {
    Retry(ReflectionError),
    Fatal(ReflectionError),
}

impl ReflectionEngine for LlmEngine {
    fn name(&self) -> &str {
        "llm"
    }

    fn reflect(&mut self, request: &ReflectionRequest) -> Result<Reflection, ReflectionError> {
        self.call("reflect", serde_json::to_value(request).expect("request serializes"))
    }

    fn repair(&mut self, request: &RepairRequest) -> Result<Reflection, ReflectionError> {
        self.call("repair", serde_json::to_value(request).expect("request serializes"))
    }
}
