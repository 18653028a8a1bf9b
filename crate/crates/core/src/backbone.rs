//! The frozen model that answers sessions.
//!
//! The mock derives its output from a digest of (seed, state hash, input),
//! so any knowledge change visibly changes outputs while staying
//! reproducible. The external adapter posts `{"system": ..., "input": ...}`
//! to an endpoint and expects `{"output": "..."}` back.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BackboneError {
    #[error("backbone unavailable: {0}")]
    Unavailable(String),
    #[error("backbone returned a malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Mock {
        #[serde(default)]
        seed: u64,
    },
    External {
        endpoint: String,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        token_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Mock { seed: 0 }
    }
}

pub trait Backbone: Send + Sync {
    fn generate(&self, system_prompt: &str, state_hash: &str, input: &str) -> Result<String, BackboneError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackbone {
    pub seed: u64,
}

impl Backbone for MockBackbone {
    fn generate(&self, _system_prompt: &str, state_hash: &str, input: &str) -> Result<String, BackboneError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(state_hash.as_bytes());
        h.update([0]);
        h.update(input.as_bytes());
        let digest = hex::encode(h.finalize());
        Ok(format!(
            "[mock {}] answer to {:?} under state {}",
            &digest[..16],
            input,
            &state_hash[..state_hash.len().min(12)]
        ))
    }
}

pub struct ExternalBackbone {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl ExternalBackbone {
    pub fn new(endpoint: &str, token_env: Option<&str>, timeout: Duration) -> Result<Self, BackboneError> {
        let token = match token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackboneError::Unavailable(format!("credential variable {var} is unset")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackboneError::Unavailable(e.to_string()))?;
        Ok(ExternalBackbone {
            endpoint: endpoint.to_string(),
            token,
            client,
        })
    }
}

#[derive(Deserialize)]
struct ExternalReply {
    output: String,
}

impl Backbone for ExternalBackbone {
    fn generate(&self, system_prompt: &str, _state_hash: &str, input: &str) -> Result<String, BackboneError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({"system": system_prompt, "input": input}));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req
            .send()
            .map_err(|e| BackboneError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(BackboneError::Unavailable(format!("status {}", resp.status())));
        }
        let text = resp
            .text()
            .map_err(|e| BackboneError::Unavailable(e.to_string()))?;
        serde_json::from_str::<ExternalReply>(&text)
            .map(|r| r.output)
            .map_err(|e| BackboneError::Malformed(e.to_string()))
    }
}

pub fn build_backbone(config: &BackboneConfig) -> Result<Box<dyn Backbone>, BackboneError> {
    Ok(match config {
        BackboneConfig::Mock { seed } => Box::new(MockBackbone { seed: *seed }),
        BackboneConfig::External {
            endpoint,
            token_env,
            timeout_ms,
        } => Box::new(ExternalBackbone::new(
            endpoint,
            token_env.as_deref(),
            Duration::from_millis(*timeout_ms),
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_depends_on_state_input_and_seed() {
        let m = MockBackbone { seed: 7 };
        let a = m.generate("", "aaaa", "hi").unwrap();
        assert_eq!(a, m.generate("ignored", "aaaa", "hi").unwrap());
        assert_ne!(a, m.generate("", "bbbb", "hi").unwrap());
        assert_ne!(a, m.generate("", "aaaa", "ho").unwrap());
        assert_ne!(a, MockBackbone { seed: 8 }.generate("", "aaaa", "hi").unwrap());
    }

    #[test]
    fn external_requires_its_credential() {
        let r = ExternalBackbone::new(
            "http://127.0.0.1:9",
            Some("ILWS_TEST_SURELY_UNSET_VAR"),
            Duration::from_millis(10),
        );
        assert!(matches!(r, Err(BackboneError::Unavailable(_))));
    }
}
