//! Monte Carlo harness: drives the full loop with synthetic sessions.
//!
//! Ratings come from a latent Gaussian, rounded to the nearest integer and
//! clamped to 1..=5. The latent mean is `baseline_mean` except:
//!
//! * `uplift`: sessions served by a candidate's provisional state get
//!   `baseline_mean + delta`;
//! * `gamed`: sessions served by a candidate's provisional state have the
//!   baseline mean but standard deviation `sigma` (noisy, adversarial raters);
//! * `drift`: the baseline mean moves by `rate` per session for every session.
//!
//! Uplift does not persist past the candidate's window, so after an
//! acceptance recalibrates the drift monitor on uplifted ratings, baseline
//! sessions read as a drop: expect many drift alarms in uplift runs.
//!
//! The knowledge state holds instructions `slot-0` .. `slot-{slots-1}`.
//! Each proposal is a session whose transcript asks to revise one slot,
//! which the mock reflection engine turns into a candidate. Before every
//! proposal the harness serves `n_win` plain sessions so that the rating
//! window a candidate is compared against holds only baseline ratings.
//!
//! The loop only uses what a client of the service sees (the candidate that
//! served a session, the rating response), so the in-process and HTTP
//! drivers produce identical histories for the same scenario and seed.

mod http;
pub mod report;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, MockBackbone};
use crate::engine::{
    BudgetView, Counters, Engine, EngineConfig, EngineError, EngineParts, EventLog, RatingOutcome,
    SessionInput,
};
use crate::gate::{Candidate, GateConfig, GateDecision};
use crate::knowledge::{InstructionEntry, KnowledgeState, Origin, Section};
use crate::reflection::{Message, MockEngine};
use crate::store::{AuditLog, CommitStore};
use crate::tools::FixtureRunner;

pub use report::{CandidateRow, Report};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("service: {0}")]
    Http(String),
    #[error("cannot write report: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RatingModel {
    Null,
    Uplift { delta: f64 },
    Drift { rate: f64 },
    Gamed { sigma: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InProcess,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: RatingModel,
    pub n_candidates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the default gate (τ = 0.05, α = 0.05, N_win = 30).
    #[serde(default)]
    pub gate: Option<GateConfig>,
    #[serde(default = "default_threshold")]
    pub budget_threshold: u64,
    #[serde(default = "default_prompt_budget")]
    pub prompt_budget: usize,
    #[serde(default = "default_interval")]
    pub session_interval_secs: i64,
    #[serde(default = "default_mean")]
    pub baseline_mean: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default)]
    pub mode: Mode,
}

fn default_threshold() -> u64 {
    200
}
fn default_prompt_budget() -> usize {
    4_000
}
fn default_interval() -> i64 {
    60
}
fn default_mean() -> f64 {
    3.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_slots() -> usize {
    8
}

/// Minimum uplift over τ for a rejection to count as a false reject.
pub const FALSE_REJECT_MARGIN: f64 = 0.5;

impl Scenario {
    pub fn new(name: &str, model: RatingModel, n_candidates: usize, seed: u64) -> Self {
        Scenario {
            name: name.to_string(),
            model,
            n_candidates,
            seed,
            gate: None,
            budget_threshold: default_threshold(),
            prompt_budget: default_prompt_budget(),
            session_interval_secs: default_interval(),
            baseline_mean: default_mean(),
            sigma: default_sigma(),
            slots: default_slots(),
            mode: Mode::InProcess,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn gate(&self) -> GateConfig {
        self.gate.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.engine_config().validate().map_err(SimError::Config)?;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_candidates == 0 {
            return bad("n_candidates must be positive");
        }
        if self.slots == 0 {
            return bad("slots must be positive");
        }
        if self.session_interval_secs <= 0 {
            return bad("session interval must be positive");
        }
        if !(self.sigma >= 0.0 && self.baseline_mean.is_finite()) {
            return bad("sigma must be non-negative and the baseline mean finite");
        }
        match self.model {
            RatingModel::Gamed { sigma } if !(sigma >= 0.0) => bad("gamed sigma must be non-negative"),
            RatingModel::Uplift { delta } if !delta.is_finite() => bad("uplift delta must be finite"),
            RatingModel::Drift { rate } if !rate.is_finite() => bad("drift rate must be finite"),
            _ => Ok(()),
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        let mut c = EngineConfig::new(self.gate(), self.budget_threshold, self.prompt_budget);
        c.session_retention = 256;
        c.metric_history = 0;
        c
    }

    pub fn start(&self) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
    }

    pub fn genesis(&self) -> KnowledgeState {
        let at = self.start();
        let s = (0..self.slots)
            .map(|i| InstructionEntry {
                id: format!("slot-{i}"),
                section: Section::Global,
                text: format!("Slot {i} guidance, initial wording."),
                created_at: at,
                origin: Origin::Manual,
            })
            .collect();
        KnowledgeState::new(s, vec![], vec![]).expect("slot state is valid")
    }

    /// Latent mean and standard deviation for a session.
    fn latent(&self, session_index: u64, under_candidate: bool) -> (f64, f64) {
        let base = self.baseline_mean;
        match self.model {
            RatingModel::Null => (base, self.sigma),
            RatingModel::Uplift { delta } if under_candidate => (base + delta, self.sigma),
            RatingModel::Uplift { .. } => (base, self.sigma),
            RatingModel::Gamed { sigma } if under_candidate => (base, sigma),
            RatingModel::Gamed { .. } => (base, self.sigma),
            RatingModel::Drift { rate } => (base + rate * session_index as f64, self.sigma),
        }
    }
}

/// Discretized latent Gaussian: round to nearest, clamp to 1..=5.
pub fn likert(latent: f64) -> u8 {
    latent.round().clamp(1.0, 5.0) as u8
}

fn draw(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> u8 {
    if sd == 0.0 {
        return likert(mean);
    }
    let n = Normal::new(mean, sd).expect("validated standard deviation");
    likert(n.sample(rng))
}

pub(crate) struct Served {
    pub session_id: String,
    pub candidate_id: Option<String>,
}

/// What the harness needs from the loop; implemented in-process and over
/// HTTP.
pub(crate) trait Driver {
    fn session(&mut self, text: &str, at: DateTime<Utc>) -> Result<Served, SimError>;
    fn rate(&mut self, session_id: &str, rating: u8, at: DateTime<Utc>) -> Result<RatingOutcome, SimError>;
    fn budget(&mut self) -> Result<(BudgetView, u64), SimError>;
    fn finish(self: Box<Self>) -> Result<Outcome, SimError>;
}

pub(crate) struct Outcome {
    pub candidates: Vec<Candidate>,
    pub decisions: Vec<GateDecision>,
    pub counters: Counters,
    pub budget: BudgetView,
    pub fingerprint: String,
}

pub(crate) fn session_transcript(input: &str, output: &str) -> Vec<Message> {
    vec![Message::new("user", input), Message::new("assistant", output)]
}

pub(crate) const SIM_BACKBONE_SEED: u64 = 0;

struct InProcess {
    engine: Engine,
    backbone: MockBackbone,
}

impl InProcess {
    fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let parts = EngineParts {
            store: CommitStore::in_memory(),
            audit: AuditLog::discard(),
            events: EventLog::discard(),
            reflector: Box::new(MockEngine::default()),
            runner: Box::new(FixtureRunner::passing()),
        };
        let engine = Engine::new(scenario.engine_config(), parts, scenario.genesis(), scenario.start())?;
        Ok(InProcess {
            engine,
            backbone: MockBackbone {
                seed: SIM_BACKBONE_SEED,
            },
        })
    }
}

impl Driver for InProcess {
    fn session(&mut self, text: &str, at: DateTime<Utc>) -> Result<Served, SimError> {
        let plan = self.engine.prepare_session(None);
        let output = self
            .backbone
            .generate(&plan.full_prompt, &plan.prompt.state_hash, text)
            .map_err(|e| SimError::Http(e.to_string()))?;
        let s = self.engine.record_session(
            SessionInput {
                input: text.to_string(),
                transcript: session_transcript(text, &output),
                output,
                tool_log: vec![],
                state_commit: plan.state_commit,
                ephemeral_digest: None,
            },
            at,
        )?;
        Ok(Served {
            session_id: s.id,
            candidate_id: plan.candidate_id,
        })
    }

    fn rate(&mut self, session_id: &str, rating: u8, at: DateTime<Utc>) -> Result<RatingOutcome, SimError> {
        let out = self
            .engine
            .rate(session_id, i64::from(rating), None, "operator", at)?;
        self.engine.run_pending(at)?;
        Ok(out)
    }

    fn budget(&mut self) -> Result<(BudgetView, u64), SimError> {
        Ok(budget_of(&self.engine))
    }

    fn finish(self: Box<Self>) -> Result<Outcome, SimError> {
        let e = &self.engine;
        Ok(Outcome {
            candidates: e.candidates().to_vec(),
            decisions: e.decisions().to_vec(),
            counters: e.counters().clone(),
            budget: budget_of(e).0,
            fingerprint: e.trace().fingerprint(),
        })
    }
}

fn budget_of(e: &Engine) -> (BudgetView, u64) {
    let b = e.budget();
    let view = BudgetView {
        value: b.value(),
        threshold: b.threshold(),
        settled: b.settled(),
        under_review: b.under_review(),
    };
    (view, e.counters().distillations)
}

/// Runs a scenario with its own seed and mode.
pub fn run_scenario(scenario: &Scenario) -> Result<Report, SimError> {
    scenario.validate()?;
    let driver: Box<dyn Driver> = match scenario.mode {
        Mode::InProcess => Box::new(InProcess::new(scenario)?),
        Mode::Http => Box::new(http::HttpDriver::start(scenario)?),
    };
    drive(scenario, driver)
}

fn drive(scenario: &Scenario, mut driver: Box<dyn Driver>) -> Result<Report, SimError> {
    let n_win = scenario.gate().n_win;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let step = Duration::seconds(scenario.session_interval_secs);
    let mut at = scenario.start();
    let mut index: u64 = 0;
    let mut baseline_run = 0usize;
    let mut proposals = 0usize;
    let mut seen: Vec<String> = Vec::new();
    let mut open: Option<String> = None;
    let mut budget_rows = Vec::new();

    loop {
        at += step;
        index += 1;
        let propose = open.is_none() && baseline_run >= n_win && seen.len() < scenario.n_candidates;
        let text = if propose {
            proposals += 1;
            let slot = proposals % scenario.slots;
            format!("revise slot-{slot}: Slot {slot} guidance, wording {}.", proposals % 97)
        } else {
            format!("question {}", index % 1000)
        };
        let served = driver.session(&text, at)?;
        match (&open, &served.candidate_id) {
            (None, Some(c)) => {
                seen.push(c.clone());
                open = Some(c.clone());
            }
            (Some(prev), None) => {
                let (b, distillations) = driver.budget()?;
                budget_rows.push(report::BudgetRow {
                    after_candidate: prev.clone(),
                    session_index: index,
                    value: b.value,
                    settled: b.settled,
                    under_review: b.under_review,
                    distillations,
                });
                open = None;
            }
            _ => {}
        }
        // The proposal's candidate only appears from the next session on.
        if served.candidate_id.is_some() || propose {
            baseline_run = 0;
        } else {
            baseline_run += 1;
        }
        if open.is_none() && seen.len() >= scenario.n_candidates {
            break;
        }
        let (mean, sd) = scenario.latent(index, served.candidate_id.is_some());
        let r = draw(&mut rng, mean, sd);
        driver.rate(&served.session_id, r, at)?;
    }
    let outcome = driver.finish()?;
    Ok(Report::build(scenario, index, proposals, outcome, budget_rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(model: RatingModel, n: usize, seed: u64) -> Scenario {
        let mut s = Scenario::new("t", model, n, seed);
        s.gate = Some(GateConfig {
            n_win: 10,
            ..GateConfig::default()
        });
        s
    }

    #[test]
    fn likert_rounds_and_clamps() {
        assert_eq!(likert(-3.0), 1);
        assert_eq!(likert(2.49), 2);
        assert_eq!(likert(2.5), 3);
        assert_eq!(likert(9.0), 5);
    }

    #[test]
    fn every_candidate_closes_and_is_rated_against_its_own_window() {
        let r = run_scenario(&small(RatingModel::Null, 12, 7)).unwrap();
        assert_eq!(r.candidates, 12);
        assert_eq!(r.candidate_rows.len(), 12);
        assert!(r.decisions >= 12);
        assert_eq!(r.budget_rows.len(), 12);
        for row in &r.candidate_rows {
            assert!(row.outcome.is_terminal() || row.outcome == crate::gate::Lifecycle::Accepted);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run_scenario(&small(RatingModel::Uplift { delta: 1.0 }, 5, 3)).unwrap();
        let b = run_scenario(&small(RatingModel::Uplift { delta: 1.0 }, 5, 3)).unwrap();
        assert_eq!(a.trace_fingerprint, b.trace_fingerprint);
        let c = run_scenario(&small(RatingModel::Uplift { delta: 1.0 }, 5, 4)).unwrap();
        assert_ne!(a.trace_fingerprint, c.trace_fingerprint);
    }

    #[test]
    fn http_driver_matches_in_process() {
        let s = small(RatingModel::Uplift { delta: 0.8 }, 4, 11);
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&Scenario { mode: Mode::Http, ..s }).unwrap();
        assert_eq!(a.trace_fingerprint, b.trace_fingerprint);
        assert_eq!(a.decision_rows, b.decision_rows);
        assert_eq!(a.candidate_rows, b.candidate_rows);
        assert_eq!(a.budget_rows, b.budget_rows);
    }

    #[test]
    fn large_uplift_is_accepted() {
        let r = run_scenario(&small(RatingModel::Uplift { delta: 1.5 }, 10, 5)).unwrap();
        assert!(r.acceptance_rate > 0.8, "{}", r.acceptance_rate);
        assert_eq!(r.false_reject_rate, Some(1.0 - r.acceptance_rate));
        assert!(r.false_accept_rate.is_none());
    }

    #[test]
    fn scenario_toml_rejects_unknown_keys() {
        let ok = "name = \"n\"\nn_candidates = 3\nmodel = { kind = \"null\" }\n";
        assert!(Scenario::from_toml(ok).is_ok());
        assert!(Scenario::from_toml(&format!("{ok}bogus = 1\n")).is_err());
        assert!(Scenario::from_toml("name = \"n\"\nn_candidates = 0\nmodel = { kind = \"null\" }\n").is_err());
    }

    #[test]
    fn report_files_have_stable_headers() {
        let r = run_scenario(&small(RatingModel::Null, 3, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = r.emit(dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let (h, rows) = report::read_table(&dir.path().join("candidates.csv")).unwrap();
        assert_eq!(h, report::CANDIDATE_COLUMNS);
        assert_eq!(rows.len(), 3);
        let (h, rows) = report::read_table(&dir.path().join("decisions.csv")).unwrap();
        assert_eq!(h, report::DECISION_COLUMNS);
        assert_eq!(rows.len() as u64, r.decisions);
        let (h, _) = report::read_table(&dir.path().join("budget.csv")).unwrap();
        assert_eq!(h, report::BUDGET_COLUMNS);
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("gate: tau=0.05 alpha=0.05 n_win=10"), "{summary}");
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["trace_fingerprint"], r.trace_fingerprint);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate() {
        let (lo, hi) = report::wilson_ci95(5, 100).unwrap();
        assert!(lo < 0.05 && 0.05 < hi);
        assert!(report::wilson_ci95(0, 0).is_none());
    }
}
