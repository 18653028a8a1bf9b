//! Score gate and candidate lifecycle.
//!
//! A candidate is accepted iff `mean_new >= mean_prev + tau` and the
//! one-sided p-value is at most `alpha`.

use std::collections::VecDeque;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::KnowledgeDelta;
use crate::reflection::SelfModCall;
use crate::stats::{self, mean_ci95, Sample, StatError, TestKind};

/// Neutral prior mean reported before the first window fills.
pub const PRIOR_MEAN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub tau: f64,
    pub alpha: f64,
    pub n_win: usize,
    /// Veto review window Δt, in seconds.
    pub review_window_secs: i64,
    pub alpha_normality: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 0.05,
            alpha: 0.05,
            n_win: 30,
            review_window_secs: 24 * 3600,
            alpha_normality: 0.05,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau >= 0.0) {
            return Err(format!("tau {} must be >= 0", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.alpha_normality > 0.0 && self.alpha_normality < 1.0) {
            return Err(format!(
                "alpha_normality {} outside (0, 1)",
                self.alpha_normality
            ));
        }
        if self.n_win < 2 {
            return Err(format!("n_win {} must be >= 2", self.n_win));
        }
        if self.review_window_secs < 0 {
            return Err("review window must be non-negative".into());
        }
        Ok(())
    }

    pub fn review_window(&self) -> Duration {
        Duration::seconds(self.review_window_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub candidate_id: String,
    /// 0 for the original delta, 1 for the repair.
    pub attempt: u8,
    pub mean_prev: f64,
    pub mean_new: f64,
    pub test_used: TestKind,
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
    pub accepted: bool,
    pub config_snapshot: GateConfig,
    pub decided_at: DateTime<Utc>,
    pub prev_window: Vec<u8>,
    pub new_window: Vec<u8>,
    pub ci_prev: Option<(f64, f64)>,
    pub ci_new: Option<(f64, f64)>,
}

/// The acceptance predicate.
pub fn accepts(mean_prev: f64, mean_new: f64, p_value: f64, config: &GateConfig) -> bool {
    mean_new >= mean_prev + config.tau && p_value <= config.alpha
}

/// Runs the selected test on the two windows and applies the predicate.
pub fn decide(
    candidate_id: &str,
    attempt: u8,
    prev: &Sample,
    new: &Sample,
    config: &GateConfig,
    decided_at: DateTime<Utc>,
) -> Result<GateDecision, StatError> {
    let test = stats::select_test(prev.values(), new.values(), config.alpha_normality);
    let result = stats::run_test(test, prev.values(), new.values())?;
    let (mean_prev, mean_new) = (prev.mean(), new.mean());
    Ok(GateDecision {
        candidate_id: candidate_id.to_string(),
        attempt,
        mean_prev,
        mean_new,
        test_used: result.test,
        statistic: result.statistic,
        degrees_of_freedom: result.degrees_of_freedom,
        p_value: result.p_value,
        accepted: accepts(mean_prev, mean_new, result.p_value, config),
        config_snapshot: *config,
        decided_at,
        prev_window: prev.ratings().to_vec(),
        new_window: new.ratings().to_vec(),
        ci_prev: mean_ci95(prev.values()),
        ci_new: mean_ci95(new.values()),
    })
}

/// Bounded FIFO of the most recent ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingBuffer {
    ratings: VecDeque<u8>,
    capacity: usize,
}

impl RatingBuffer {
    pub fn new(capacity: usize) -> Self {
        RatingBuffer {
            ratings: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, rating: u8) {
        if self.ratings.len() == self.capacity {
            self.ratings.pop_front();
        }
        self.ratings.push_back(rating);
    }

    pub fn is_full(&self) -> bool {
        self.ratings.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.ratings.iter().copied().collect()
    }

    /// Window mean, or the neutral prior while the buffer is empty.
    pub fn mean(&self) -> f64 {
        if self.ratings.is_empty() {
            PRIOR_MEAN
        } else {
            self.ratings.iter().map(|&r| f64::from(r)).sum::<f64>() / self.ratings.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Proposed,
    Provisional,
    RepairPending,
    RepairedProvisional,
    Accepted,
    RolledBack,
    Vetoed,
}

impl Lifecycle {
    pub fn in_flight(self) -> bool {
        matches!(
            self,
            Lifecycle::Provisional | Lifecycle::RepairPending | Lifecycle::RepairedProvisional
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Lifecycle::RolledBack | Lifecycle::Vetoed)
    }

    /// Permitted transitions. Besides the main path, an in-flight candidate
    /// may be rolled back when an earlier candidate is vetoed underneath it.
    pub fn can_become(self, next: Lifecycle) -> bool {
        use Lifecycle::*;
        matches!(
            (self, next),
            (Proposed, Provisional)
                | (Provisional, Accepted)
                | (Provisional, RepairPending)
                | (RepairPending, RepairedProvisional)
                | (RepairedProvisional, Accepted)
                | (RepairedProvisional, RolledBack)
                | (Accepted, Vetoed)
        ) || (self.in_flight() && next == RolledBack)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("illegal lifecycle transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: Lifecycle,
    pub to: Lifecycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub origin_session: Option<String>,
    /// Delta as proposed.
    pub delta: KnowledgeDelta,
    pub calls: Vec<SelfModCall>,
    /// Delta actually deployed for the current attempt, after tool
    /// registration has settled tool statuses and rubrics.
    pub applied_delta: KnowledgeDelta,
    pub repair: Option<KnowledgeDelta>,
    pub repair_calls: Vec<SelfModCall>,
    pub base_commit: String,
    pub provisional_commit: String,
    pub lifecycle: Lifecycle,
    pub repair_count: u8,
    pub prev_window: Vec<u8>,
    pub new_window: Vec<u8>,
    pub evaluation_scheduled: bool,
    pub decisions: Vec<GateDecision>,
    pub veto_deadline: Option<DateTime<Utc>>,
    pub accepted_commit: Option<String>,
    pub quarantine_commit: Option<String>,
    pub credited_size: u64,
    pub opened_at: DateTime<Utc>,
    pub closed_at: Option<DateTime<Utc>>,
    pub note: Option<String>,
}

impl Candidate {
    pub fn transition(&mut self, next: Lifecycle) -> Result<(), TransitionError> {
        if !self.lifecycle.can_become(next) {
            return Err(TransitionError {
                from: self.lifecycle,
                to: next,
            });
        }
        self.lifecycle = next;
        Ok(())
    }

    pub fn decision(&self) -> Option<&GateDecision> {
        self.decisions.last()
    }

    /// Calls of the attempt currently deployed (repair if any).
    pub fn current_calls(&self) -> &[SelfModCall] {
        if self.repair_count > 0 {
            &self.repair_calls
        } else {
            &self.calls
        }
    }
}
