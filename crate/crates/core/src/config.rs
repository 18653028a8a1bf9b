//! Service configuration, loaded once from TOML at startup.
//!
//! `budget.threshold` (M) and `prompt.budget_tokens` (C) have no defaults;
//! a file that omits either is rejected. Secrets never appear in the file:
//! it names the environment variables that hold them.
//!
//! ```toml
//! [gate]
//! tau = 0.05
//! alpha = 0.05
//! n_win = 30
//! review_window_secs = 86400
//!
//! [budget]
//! threshold = 2000
//!
//! [prompt]
//! budget_tokens = 4000
//!
//! [storage]
//! root = "var/forge"
//!
//! [reflection]
//! kind = "mock"
//!
//! [backbone]
//! kind = "mock"
//! seed = 0
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! operator_token_env = "ILWS_OPERATOR_TOKEN"
//! admin_token_env = "ILWS_ADMIN_TOKEN"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::engine::EngineConfig;
use crate::gate::GateConfig;
use crate::reflection::{LlmConfig, LlmEngine, MockEngine, ReflectionEngine, RuleTable};
use crate::stats::DriftConfig;
use crate::tools::{Denylist, FixtureRunner, LocalProcessRunner, TestRunner, ToolPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is unset")]
    MissingSecret(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub budget_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSection {
    pub root: PathBuf,
    /// Knowledge document the history starts from; empty state otherwise.
    #[serde(default)]
    pub genesis: Option<PathBuf>,
    /// Mirror every commit into a git repository at this path.
    #[serde(default)]
    pub git_mirror: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunnerSection {
    /// Every tool passes. For offline runs and tests only.
    AlwaysPass,
    Process {
        program: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default)]
        script_name: Option<String>,
    },
}

impl Default for RunnerSection {
    fn default() -> Self {
        RunnerSection::Process {
            program: "python3".into(),
            args: vec!["{script}".into()],
            script_name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsSection {
    pub sandbox_root: PathBuf,
    pub denylist: Option<Vec<String>>,
    pub time_limit_ms: u64,
    pub output_cap_bytes: usize,
    pub runner: RunnerSection,
}

impl Default for ToolsSection {
    fn default() -> Self {
        let p = ToolPolicy::default();
        ToolsSection {
            sandbox_root: p.sandbox_root,
            denylist: None,
            time_limit_ms: p.time_limit_ms,
            output_cap_bytes: p.output_cap_bytes,
            runner: RunnerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReflectionSection {
    Mock {
        /// Rule table file replacing the built-in rules.
        #[serde(default)]
        rules: Option<PathBuf>,
    },
    Llm(LlmConfig),
}

impl Default for ReflectionSection {
    fn default() -> Self {
        ReflectionSection::Mock { rules: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    pub operator_token_env: String,
    pub admin_token_env: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            operator_token_env: "ILWS_OPERATOR_TOKEN".into(),
            admin_token_env: "ILWS_ADMIN_TOKEN".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// Export directory; defaults to `<storage.root>/datasets`.
    pub dir: Option<PathBuf>,
    pub inline_prompts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionSection {
    pub sessions: usize,
    pub metric_points: usize,
}

impl Default for RetentionSection {
    fn default() -> Self {
        RetentionSection {
            sessions: 10_000,
            metric_points: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub gate: GateConfig,
    pub budget: BudgetSection,
    pub prompt: PromptSection,
    pub storage: StorageSection,
    #[serde(default)]
    pub tools: ToolsSection,
    #[serde(default)]
    pub reflection: ReflectionSection,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub service: ServiceSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub retention: RetentionSection,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.engine().validate().map_err(ConfigError::Invalid)?;
        if config.service.operator_token_env == config.service.admin_token_env {
            return Err(ConfigError::Invalid(
                "operator and admin tokens must come from different variables".into(),
            ));
        }
        Ok(config)
    }

    /// Loads a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.storage.root);
        self.storage.genesis.as_mut().map(fix);
        self.storage.git_mirror.as_mut().map(fix);
        fix(&mut self.tools.sandbox_root);
        self.distill.dir.as_mut().map(fix);
        if let ReflectionSection::Mock { rules: Some(r) } = &mut self.reflection {
            fix(r);
        }
    }

    pub fn engine(&self) -> EngineConfig {
        let mut tools = ToolPolicy {
            sandbox_root: self.tools.sandbox_root.clone(),
            time_limit_ms: self.tools.time_limit_ms,
            output_cap_bytes: self.tools.output_cap_bytes,
            ..ToolPolicy::default()
        };
        if let Some(patterns) = &self.tools.denylist {
            // Invalid lists are reported by `validate`.
            if let Ok(d) = Denylist::new(patterns.clone()) {
                tools.denylist = d;
            }
        }
        EngineConfig {
            gate: self.gate,
            budget_threshold: self.budget.threshold,
            prompt_budget: self.prompt.budget_tokens,
            tools,
            drift: self.drift,
            distill_dir: Some(
                self.distill
                    .dir
                    .clone()
                    .unwrap_or_else(|| self.storage.root.join("datasets")),
            ),
            inline_prompts: self.distill.inline_prompts,
            session_retention: self.retention.sessions,
            metric_history: self.retention.metric_points,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(patterns) = &self.tools.denylist {
            Denylist::new(patterns.clone()).map_err(ConfigError::Invalid)?;
        }
        self.engine().validate().map_err(ConfigError::Invalid)
    }

    pub fn reflector(&self) -> Result<Box<dyn ReflectionEngine>, ConfigError> {
        Ok(match &self.reflection {
            ReflectionSection::Mock { rules: None } => Box::new(MockEngine::default()),
            ReflectionSection::Mock { rules: Some(path) } => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Box::new(MockEngine::new(RuleTable::from_toml(&text).map_err(ConfigError::Invalid)?))
            }
            ReflectionSection::Llm(c) => {
                Box::new(LlmEngine::new(c.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?)
            }
        })
    }

    pub fn runner(&self) -> Box<dyn TestRunner> {
        match &self.tools.runner {
            RunnerSection::AlwaysPass => Box::new(FixtureRunner::passing()),
            RunnerSection::Process {
                program,
                args,
                script_name,
            } => Box::new(LocalProcessRunner {
                program: program.clone(),
                args: args.clone(),
                script_name: script_name.clone().unwrap_or_else(|| "tool_test.py".into()),
            }),
        }
    }

    /// Reads a bearer token from the environment variable named in config.
    pub fn secret(var: &str) -> Result<String, ConfigError> {
        match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(v),
            _ => Err(ConfigError::MissingSecret(var.to_string())),
        }
    }
}
