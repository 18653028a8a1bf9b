//! Read-only views of the engine, published after every mutation.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::gate::{Candidate, GateConfig, GateDecision, Lifecycle};
use crate::knowledge::{ComposedPrompt, KnowledgeState, ToolEntry};
use crate::stats::DriftMonitorState;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub sessions: u64,
    pub ratings: u64,
    pub backbone_failures: u64,
    pub reflections: u64,
    pub reflections_dropped: u64,
    pub reflection_failures: u64,
    pub candidates: u64,
    pub decisions: u64,
    pub accepted_decisions: u64,
    pub accepted: u64,
    pub repairs: u64,
    pub rolled_back: u64,
    pub vetoed: u64,
    pub preempted: u64,
    pub reverts: u64,
    pub distillations: u64,
    pub alarms: u64,
    pub tools_activated: u64,
    pub tools_quarantined: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub rating_seq: u64,
    pub at: DateTime<Utc>,
    pub rating: u8,
    pub window_mean: f64,
    pub ewma: Option<f64>,
    pub ewma_limit: Option<f64>,
    pub cusum_neg: Option<f64>,
    pub alarm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetView {
    pub value: u64,
    pub threshold: u64,
    pub settled: u64,
    pub under_review: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub candidate: Candidate,
    pub collected: usize,
    pub needed: usize,
    pub delta_size: u64,
    pub veto_open: bool,
    /// Seconds left in the veto window at snapshot time.
    pub veto_seconds_left: Option<i64>,
}

impl CandidateView {
    pub fn new(c: &Candidate, gate: &GateConfig, now: DateTime<Utc>) -> Self {
        let veto_open = c.lifecycle == Lifecycle::Accepted && c.veto_deadline.is_some_and(|d| now <= d);
        CandidateView {
            collected: c.new_window.len(),
            needed: gate.n_win,
            delta_size: crate::knowledge::delta_size(&c.applied_delta) as u64,
            veto_open,
            veto_seconds_left: c
                .veto_deadline
                .filter(|_| veto_open)
                .map(|d| (d - now).num_seconds()),
            candidate: c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolReview {
    pub tool: ToolEntry,
    pub failure_diff: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub at: DateTime<Utc>,
    pub state: Arc<KnowledgeState>,
    pub prompt: ComposedPrompt,
    pub serving_commit: String,
    pub serving_candidate: Option<String>,
    pub warm_up: bool,
    pub buffer: Vec<u8>,
    pub buffer_capacity: usize,
    pub prior_mean: f64,
    pub window_mean: f64,
    pub window_ci95: Option<(f64, f64)>,
    pub drift: Option<DriftMonitorState>,
    pub budget: BudgetView,
    pub counters: Counters,
    pub gate: GateConfig,
    pub in_flight: Option<String>,
    pub candidates: Vec<CandidateView>,
    pub decisions: Vec<GateDecision>,
    pub metrics: Vec<MetricPoint>,
    pub tool_review: Vec<ToolReview>,
    pub trace_fingerprint: String,
}

impl EngineSnapshot {
    pub fn plan_session(&self, ephemeral: Option<&str>) -> super::SessionPlan {
        super::plan_session(
            &self.prompt,
            &self.serving_commit,
            self.serving_candidate.as_deref(),
            ephemeral,
        )
    }
}
