//! Simulation reports: a JSON summary, plot-ready CSV tables and a short
//! text summary.
//!
//! CSV columns (stable; new columns are only ever appended):
//!
//! * `candidates.csv`: [`CANDIDATE_COLUMNS`]
//! * `decisions.csv`: [`DECISION_COLUMNS`]
//! * `budget.csv`: [`BUDGET_COLUMNS`]

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Outcome, RatingModel, Scenario, SimError, FALSE_REJECT_MARGIN};
use crate::engine::{BudgetView, Counters};
use crate::gate::{GateConfig, Lifecycle};

pub const CANDIDATE_COLUMNS: [&str; 12] = [
    "candidate_id",
    "outcome",
    "attempts",
    "first_p_value",
    "first_mean_prev",
    "first_mean_new",
    "first_accepted",
    "final_p_value",
    "delta_size",
    "opened_at",
    "closed_at",
    "seconds_to_accept",
];

pub const DECISION_COLUMNS: [&str; 10] = [
    "candidate_id",
    "attempt",
    "mean_prev",
    "mean_new",
    "test",
    "statistic",
    "degrees_of_freedom",
    "p_value",
    "accepted",
    "decided_at",
];

pub const BUDGET_COLUMNS: [&str; 6] = [
    "after_candidate",
    "session_index",
    "value",
    "settled",
    "under_review",
    "distillations",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub candidate_id: String,
    pub outcome: Lifecycle,
    pub attempts: usize,
    pub first_p_value: Option<f64>,
    pub first_mean_prev: Option<f64>,
    pub first_mean_new: Option<f64>,
    pub first_accepted: bool,
    pub final_p_value: Option<f64>,
    pub delta_size: u64,
    pub opened_at: String,
    pub closed_at: Option<String>,
    pub seconds_to_accept: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub candidate_id: String,
    pub attempt: u8,
    pub mean_prev: f64,
    pub mean_new: f64,
    pub test: String,
    pub statistic: f64,
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
    pub accepted: bool,
    pub decided_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub after_candidate: String,
    pub session_index: u64,
    pub value: u64,
    pub settled: u64,
    pub under_review: u64,
    pub distillations: u64,
}

/// Wilson score interval for a binomial proportion at 95%.
pub fn wilson_ci95(successes: u64, n: u64) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let z = 1.959_963_984_540_054_f64;
    let (k, n) = (successes as f64, n as f64);
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    Some(((centre - half).max(0.0), (centre + half).min(1.0)))
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Scenario,
    pub gate: GateConfig,
    pub sessions: u64,
    pub proposals: usize,
    pub candidates: usize,
    pub decisions: u64,
    pub accepted_decisions: u64,
    /// Accepted gate decisions over all gate decisions; each first attempt
    /// and each repair is one decision.
    pub acceptance_rate: f64,
    pub acceptance_rate_ci95: Option<(f64, f64)>,
    pub first_attempt_acceptance_rate: Option<f64>,
    /// Candidates that ended accepted over all candidates.
    pub candidate_acceptance_rate: Option<f64>,
    /// Null model only: every acceptance is false.
    pub false_accept_rate: Option<f64>,
    /// Uplift of at least τ + margin only: rejected decisions over all.
    pub false_reject_rate: Option<f64>,
    pub mean_seconds_to_accept: Option<f64>,
    pub mean_sessions_to_accept: Option<f64>,
    pub repairs: u64,
    pub rollbacks: u64,
    pub distillations: u64,
    pub alarms: u64,
    pub final_budget: BudgetView,
    pub counters: Counters,
    pub trace_fingerprint: String,
    #[serde(skip)]
    pub candidate_rows: Vec<CandidateRow>,
    #[serde(skip)]
    pub decision_rows: Vec<DecisionRow>,
    #[serde(skip)]
    pub budget_rows: Vec<BudgetRow>,
}

impl Report {
    pub(crate) fn build(
        scenario: &Scenario,
        sessions: u64,
        proposals: usize,
        outcome: Outcome,
        budget_rows: Vec<BudgetRow>,
    ) -> Report {
        let gate = scenario.gate();
        let decisions = outcome.decisions.len() as u64;
        let accepted_decisions = outcome.decisions.iter().filter(|d| d.accepted).count() as u64;
        let firsts: Vec<_> = outcome.decisions.iter().filter(|d| d.attempt == 0).collect();
        let first_accepted = firsts.iter().filter(|d| d.accepted).count() as u64;
        let candidates = outcome.candidates.len();
        let accepted_candidates = outcome
            .candidates
            .iter()
            .filter(|c| c.accepted_commit.is_some())
            .count() as u64;
        let acceptance_rate = ratio(accepted_decisions, decisions).unwrap_or(0.0);
        let to_accept: Vec<i64> = outcome
            .candidates
            .iter()
            .filter_map(|c| {
                let d = c.decisions.iter().find(|d| d.accepted)?;
                Some((d.decided_at - c.opened_at).num_seconds())
            })
            .collect();
        let mean_seconds_to_accept =
            (!to_accept.is_empty()).then(|| to_accept.iter().sum::<i64>() as f64 / to_accept.len() as f64);

        let candidate_rows = outcome
            .candidates
            .iter()
            .map(|c| {
                let first = c.decisions.first();
                let accept = c.decisions.iter().find(|d| d.accepted);
                CandidateRow {
                    candidate_id: c.id.clone(),
                    outcome: c.lifecycle,
                    attempts: c.decisions.len(),
                    first_p_value: first.map(|d| d.p_value),
                    first_mean_prev: first.map(|d| d.mean_prev),
                    first_mean_new: first.map(|d| d.mean_new),
                    first_accepted: first.is_some_and(|d| d.accepted),
                    final_p_value: c.decisions.last().map(|d| d.p_value),
                    delta_size: crate::knowledge::delta_size(&c.applied_delta) as u64,
                    opened_at: c.opened_at.to_rfc3339(),
                    closed_at: c
                        .decisions
                        .last()
                        .filter(|_| c.lifecycle.is_terminal() || c.accepted_commit.is_some())
                        .map(|d| d.decided_at.to_rfc3339()),
                    seconds_to_accept: accept.map(|d| (d.decided_at - c.opened_at).num_seconds()),
                }
            })
            .collect();
        let decision_rows = outcome
            .decisions
            .iter()
            .map(|d| DecisionRow {
                candidate_id: d.candidate_id.clone(),
                attempt: d.attempt,
                mean_prev: d.mean_prev,
                mean_new: d.mean_new,
                test: serde_json::to_value(d.test_used)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                statistic: d.statistic,
                degrees_of_freedom: d.degrees_of_freedom,
                p_value: d.p_value,
                accepted: d.accepted,
                decided_at: d.decided_at.to_rfc3339(),
            })
            .collect();

        let false_accept_rate = matches!(scenario.model, RatingModel::Null).then_some(acceptance_rate);
        let false_reject_rate = match scenario.model {
            RatingModel::Uplift { delta } if delta >= gate.tau + FALSE_REJECT_MARGIN => {
                ratio(decisions - accepted_decisions, decisions)
            }
            _ => None,
        };
        Report {
            scenario: scenario.clone(),
            gate,
            sessions,
            proposals,
            candidates,
            decisions,
            accepted_decisions,
            acceptance_rate,
            acceptance_rate_ci95: wilson_ci95(accepted_decisions, decisions),
            first_attempt_acceptance_rate: ratio(first_accepted, firsts.len() as u64),
            candidate_acceptance_rate: ratio(accepted_candidates, candidates as u64),
            false_accept_rate,
            false_reject_rate,
            mean_seconds_to_accept,
            mean_sessions_to_accept: mean_seconds_to_accept
                .map(|s| s / scenario.session_interval_secs as f64),
            repairs: outcome.counters.repairs,
            rollbacks: outcome.counters.rolled_back,
            distillations: outcome.counters.distillations,
            alarms: outcome.counters.alarms,
            final_budget: outcome.budget,
            counters: outcome.counters,
            trace_fingerprint: outcome.fingerprint,
            candidate_rows,
            decision_rows,
            budget_rows,
        }
    }

    pub fn summary(&self) -> String {
        let g = &self.gate;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let ci = self
            .acceptance_rate_ci95
            .map_or("n/a".into(), |(lo, hi)| format!("[{lo:.4}, {hi:.4}]"));
        let model = serde_json::to_string(&self.scenario.model).unwrap_or_default();
        format!(
            "scenario: {name} (seed {seed}, {mode:?})\n\
             model: {model}\n\
             gate: tau={tau} alpha={alpha} n_win={n_win} review_window_secs={rw}\n\
             budget threshold M={m}\n\
             sessions: {sessions}\n\
             candidates: {cands} ({props} proposals)\n\
             gate decisions: {dec} (accepted {acc})\n\
             acceptance rate: {rate:.4} 95% CI {ci}\n\
             first-attempt acceptance rate: {first}\n\
             candidate acceptance rate: {cand_rate}\n\
             false-accept rate: {far}\n\
             false-reject rate: {frr}\n\
             mean time to accept: {tta} s ({tts} sessions)\n\
             repairs: {rep}  rollbacks: {rb}  distillations: {dist}  drift alarms: {al}\n\
             final budget: {bv} (settled {bs}, under review {bu})\n\
             trace fingerprint: {fp}\n",
            name = self.scenario.name,
            seed = self.scenario.seed,
            mode = self.scenario.mode,
            tau = g.tau,
            alpha = g.alpha,
            n_win = g.n_win,
            rw = g.review_window_secs,
            m = self.scenario.budget_threshold,
            sessions = self.sessions,
            cands = self.candidates,
            props = self.proposals,
            dec = self.decisions,
            acc = self.accepted_decisions,
            rate = self.acceptance_rate,
            first = opt(self.first_attempt_acceptance_rate),
            cand_rate = opt(self.candidate_acceptance_rate),
            far = opt(self.false_accept_rate),
            frr = opt(self.false_reject_rate),
            tta = opt(self.mean_seconds_to_accept),
            tts = opt(self.mean_sessions_to_accept),
            rep = self.repairs,
            rb = self.rollbacks,
            dist = self.distillations,
            al = self.alarms,
            bv = self.final_budget.value,
            bs = self.final_budget.settled,
            bu = self.final_budget.under_review,
            fp = self.trace_fingerprint,
        )
    }

    /// Writes `report.json`, `summary.txt` and the CSV tables into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
        let io = |e: std::io::Error| SimError::Storage(e.to_string());
        let csv_err = |e: csv::Error| SimError::Storage(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut written = Vec::new();

        let json_path = dir.join("report.json");
        let mut json = serde_json::to_vec_pretty(self).expect("report serializes");
        json.push(b'\n');
        std::fs::write(&json_path, json).map_err(io)?;
        written.push(json_path);

        let summary_path = dir.join("summary.txt");
        std::fs::write(&summary_path, self.summary()).map_err(io)?;
        written.push(summary_path);

        fn table<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), csv::Error> {
            let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
            if rows.is_empty() {
                w.write_record(header)?;
            }
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
        let tables = [
            ("candidates.csv", table(&dir.join("candidates.csv"), &self.candidate_rows, &CANDIDATE_COLUMNS)),
            ("decisions.csv", table(&dir.join("decisions.csv"), &self.decision_rows, &DECISION_COLUMNS)),
            ("budget.csv", table(&dir.join("budget.csv"), &self.budget_rows, &BUDGET_COLUMNS)),
        ];
        for (name, result) in tables {
            result.map_err(csv_err)?;
            written.push(dir.join(name));
        }
        Ok(written)
    }
}

/// Reads a CSV table written by [`Report::emit`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Storage(e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| SimError::Storage(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| SimError::Storage(e.to_string()))?;
    Ok((header, rows))
}
