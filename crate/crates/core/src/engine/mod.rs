//! The single-writer loop engine.
//!
//! Every mutation of knowledge, candidates, budget and logs goes through
//! `&mut Engine`. Commands carry their own timestamps and the engine never
//! reads a clock, so the same event log always produces the same commits,
//! decisions and budget values.
//!
//! Per rated session: the rating enters the sliding buffer; if a candidate
//! is being evaluated and the session was served by its provisional state,
//! the rating joins the candidate's new window; once warm-up is over and no
//! candidate is in flight, the session is reflected on and a non-empty delta
//! opens the next candidate. Background work (reflection, gate evaluation,
//! repair, rollback) runs in [`Engine::run_pending`].

pub mod events;
pub mod snapshot;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::{compile_dataset, export_dataset, Budget, DatasetRow};
use crate::gate::{self, Candidate, GateConfig, GateDecision, Lifecycle, RatingBuffer, TransitionError};
use crate::knowledge::{
    apply_delta, compose_prompt, delta_size, digest_hex, ComposedPrompt, DeltaError, KnowledgeDelta,
    KnowledgeState, Proposer, ToolStatus,
};
use crate::reflection::{
    parse_self_mod_calls, Message, ParseContext, ReflectionEngine, ReflectionRequest, RepairRequest,
    SelfModCall, SessionRecord, ToolLogEntry, VetoFlag,
};
use crate::stats::{mean_ci95, DriftConfig, DriftMonitorState, Sample};
use crate::store::{
    AuditKind, AuditLog, Author, CommitMeta, CommitReason, CommitStore, StoreError, TagKind,
};
use crate::tools::{
    created_tools, read_failure_diff, register_tool, Registration, RunOutcome, RunRequest,
    RunnerError, TestRunner, ToolPolicy,
};

pub use events::{read_events, sessions_from_events, EngineEvent, EventLog};
pub use snapshot::{BudgetView, CandidateView, Counters, EngineSnapshot, MetricPoint, ToolReview};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub gate: GateConfig,
    /// Distillation threshold M, in tokens.
    pub budget_threshold: u64,
    /// Prompt budget C, in tokens.
    pub prompt_budget: usize,
    #[serde(default)]
    pub tools: ToolPolicy,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub distill_dir: Option<PathBuf>,
    #[serde(default)]
    pub inline_prompts: bool,
    /// Rated and distilled sessions kept for lookup.
    #[serde(default = "default_retention")]
    pub session_retention: usize,
    /// Metric points kept for the rating timeline; 0 disables the series.
    #[serde(default = "default_metric_history")]
    pub metric_history: usize,
}

fn default_retention() -> usize {
    10_000
}

fn default_metric_history() -> usize {
    2_000
}

impl EngineConfig {
    pub fn new(gate: GateConfig, budget_threshold: u64, prompt_budget: usize) -> Self {
        EngineConfig {
            gate,
            budget_threshold,
            prompt_budget,
            tools: ToolPolicy::default(),
            drift: DriftConfig::default(),
            distill_dir: None,
            inline_prompts: false,
            session_retention: default_retention(),
            metric_history: default_metric_history(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.gate.validate()?;
        self.drift.validate()?;
        if self.budget_threshold == 0 {
            return Err("budget threshold M must be positive".into());
        }
        if self.prompt_budget == 0 {
            return Err("prompt budget C must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("session input is empty")]
    EmptyInput,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is already rated")]
    AlreadyRated(String),
    #[error("rating {0} outside 1..=5")]
    InvalidRating(i64),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("candidate {id} is {lifecycle:?}, not accepted")]
    NotAccepted { id: String, lifecycle: Lifecycle },
    #[error("veto window of {id} closed at {deadline}")]
    VetoWindowClosed { id: String, deadline: DateTime<Utc> },
    #[error("warm-up incomplete: {have} of {need} ratings")]
    WarmupIncomplete { have: usize, need: usize },
    #[error("candidate {0} is in flight")]
    CandidateInFlight(String),
    #[error("delta rejected: {0}")]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("event log: {0}")]
    EventLog(String),
    #[error("replay diverged: {0}")]
    Replay(String),
}

/// What a session is served with, computed from the current snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub prompt: ComposedPrompt,
    /// Full prompt including the ephemeral context.
    pub full_prompt: String,
    pub state_commit: String,
    /// Candidate whose provisional state serves this session, if any.
    pub candidate_id: Option<String>,
    pub ephemeral_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionInput {
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub transcript: Vec<Message>,
    #[serde(default)]
    pub tool_log: Vec<ToolLogEntry>,
    pub state_commit: String,
    #[serde(default)]
    pub ephemeral_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProgress {
    pub id: String,
    pub lifecycle: Lifecycle,
    pub collected: usize,
    pub needed: usize,
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingOutcome {
    pub session_id: String,
    pub rating: u8,
    pub warm_up: bool,
    pub buffer_len: usize,
    pub buffer_capacity: usize,
    pub candidate: Option<CandidateProgress>,
    pub evaluation_scheduled: bool,
    pub reflection_scheduled: bool,
    pub reflection_dropped: bool,
    pub status: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetoOutcome {
    pub candidate_id: String,
    /// Later accepted candidates that were built on the vetoed one.
    pub cascaded: Vec<String>,
    pub preempted: Option<String>,
    pub restored_commit: String,
    pub state_hash: String,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevertOutcome {
    pub reference: String,
    pub commit: String,
    pub state_hash: String,
    pub tag_kind: Option<TagKind>,
    pub preempted: Option<String>,
}

/// Running digest over every commit id, gate decision and budget value the
/// engine produces, in order.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    hasher: Sha256,
    pub commits: u64,
    pub decisions: u64,
    pub budget_values: Vec<u64>,
}

impl Trace {
    fn commit(&mut self, id: &str) {
        self.commits += 1;
        self.hasher.update(b"commit ");
        self.hasher.update(id.as_bytes());
        self.hasher.update(b"\n");
    }

    fn decision(&mut self, d: &GateDecision) {
        self.decisions += 1;
        self.hasher.update(b"decision ");
        self.hasher.update(serde_json::to_vec(d).expect("decision serializes"));
        self.hasher.update(b"\n");
    }

    fn budget(&mut self, value: u64) {
        self.budget_values.push(value);
        self.hasher.update(format!("budget {value}\n").as_bytes());
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

enum Work {
    Evaluate(usize),
    Reflect(String),
}

/// Collaborators an engine is assembled from.
pub struct EngineParts {
    pub store: CommitStore,
    pub audit: AuditLog,
    pub events: EventLog,
    pub reflector: Box<dyn ReflectionEngine>,
    pub runner: Box<dyn TestRunner>,
}

struct Recording<'a> {
    inner: &'a mut dyn TestRunner,
    seen: Vec<(String, Result<RunOutcome, RunnerError>)>,
}

impl TestRunner for Recording<'_> {
    fn run(&mut self, request: &RunRequest<'_>) -> Result<RunOutcome, RunnerError> {
        let r = self.inner.run(request);
        self.seen.push((request.tool.name.clone(), r.clone()));
        r
    }
}

pub struct Engine {
    config: EngineConfig,
    store: Arc<RwLock<CommitStore>>,
    audit: AuditLog,
    events: EventLog,
    reflector: Box<dyn ReflectionEngine>,
    runner: Box<dyn TestRunner>,
    serving: Arc<KnowledgeState>,
    serving_commit: String,
    prompt: ComposedPrompt,
    buffer: RatingBuffer,
    drift: Option<DriftMonitorState>,
    candidates: Vec<Candidate>,
    by_id: HashMap<String, usize>,
    in_flight: Option<usize>,
    under_review: BTreeSet<usize>,
    pending: VecDeque<Work>,
    budget: Budget,
    sessions: HashMap<String, SessionRecord>,
    undistilled: Vec<String>,
    retired: VecDeque<String>,
    veto_flags: Vec<VetoFlag>,
    counters: Counters,
    metrics: VecDeque<MetricPoint>,
    trace: Trace,
    decisions: Vec<GateDecision>,
    session_seq: u64,
    distill_seq: u64,
    last_at: DateTime<Utc>,
}

fn fmt_id(prefix: &str, n: u64) -> String {
    format!("{prefix}-{n:06}")
}

impl Engine {
    /// Starts a new history from `genesis`. The store must be empty.
    pub fn new(
        config: EngineConfig,
        parts: EngineParts,
        genesis: KnowledgeState,
        at: DateTime<Utc>,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Config)?;
        if !parts.store.is_empty() {
            return Err(EngineError::Config(
                "store already has history; restore it from its event log".into(),
            ));
        }
        let prompt = compose_prompt(&genesis, config.prompt_budget);
        let mut engine = Engine {
            buffer: RatingBuffer::new(config.gate.n_win),
            budget: Budget::new(config.budget_threshold),
            store: Arc::new(RwLock::new(parts.store)),
            audit: parts.audit,
            events: parts.events,
            reflector: parts.reflector,
            runner: parts.runner,
            serving: Arc::new(genesis.clone()),
            serving_commit: String::new(),
            prompt,
            drift: None,
            candidates: Vec::new(),
            by_id: HashMap::new(),
            in_flight: None,
            under_review: BTreeSet::new(),
            pending: VecDeque::new(),
            sessions: HashMap::new(),
            undistilled: Vec::new(),
            retired: VecDeque::new(),
            veto_flags: Vec::new(),
            counters: Counters::default(),
            metrics: VecDeque::new(),
            trace: Trace::default(),
            decisions: Vec::new(),
            session_seq: 0,
            distill_seq: 0,
            last_at: at,
            config,
        };
        engine.log(EngineEvent::Genesis {
            at,
            state: genesis.clone(),
            config: Some(engine.config.clone()),
        })?;
        let commit = engine.commit(&genesis, Author::System, CommitReason::Manual, None, at)?;
        engine.serving_commit = commit;
        engine.trace.budget(0);
        Ok(engine)
    }

    // ---- accessors -------------------------------------------------------

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> RwLockReadGuard<'_, CommitStore> {
        self.store.read().expect("store lock")
    }

    fn store_mut(&self) -> RwLockWriteGuard<'_, CommitStore> {
        self.store.write().expect("store lock")
    }

    /// Shared handle for readers that must not wait on the writer.
    pub fn store_handle(&self) -> Arc<RwLock<CommitStore>> {
        self.store.clone()
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn serving_state(&self) -> &Arc<KnowledgeState> {
        &self.serving
    }

    pub fn serving_commit(&self) -> &str {
        &self.serving_commit
    }

    pub fn buffer(&self) -> &RatingBuffer {
        &self.buffer
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn decisions(&self) -> &[GateDecision] {
        &self.decisions
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.by_id.get(id).map(|&i| &self.candidates[i])
    }

    pub fn in_flight(&self) -> Option<&Candidate> {
        self.in_flight.map(|i| &self.candidates[i])
    }

    pub fn session(&self, id: &str) -> Option<&SessionRecord> {
        self.sessions.get(id)
    }

    pub fn veto_flags(&self) -> &[VetoFlag] {
        &self.veto_flags
    }

    pub fn drift(&self) -> Option<&DriftMonitorState> {
        self.drift.as_ref()
    }

    pub fn has_pending_work(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn last_event_at(&self) -> DateTime<Utc> {
        self.last_at
    }

    // ---- internals -------------------------------------------------------

    fn log(&mut self, event: EngineEvent) -> Result<(), EngineError> {
        self.events
            .record(event)
            .map_err(|e| EngineError::EventLog(e.to_string()))
    }

    fn note(&mut self, kind: AuditKind, at: DateTime<Utc>, payload: Value) {
        if let Err(e) = self.audit.append(kind, at, payload) {
            tracing::error!(error = %e, ?kind, "audit append failed");
        }
    }

    fn commit(
        &mut self,
        state: &KnowledgeState,
        author: Author,
        reason: CommitReason,
        candidate: Option<&str>,
        at: DateTime<Utc>,
    ) -> Result<String, EngineError> {
        let meta = CommitMeta {
            author,
            candidate_id: candidate.map(str::to_string),
            reason,
            timestamp: at,
        };
        let c = self.store_mut().commit_state(state, meta)?;
        self.trace.commit(&c.id);
        Ok(c.id)
    }

    fn serve(&mut self, state: Arc<KnowledgeState>, commit: String) {
        self.prompt = compose_prompt(&state, self.config.prompt_budget);
        self.serving = state;
        self.serving_commit = commit;
    }

    fn state_of(&self, commit: &str) -> Result<Arc<KnowledgeState>, EngineError> {
        self.store()
            .state(commit)
            .ok_or_else(|| EngineError::Store(StoreError::UnknownRef(commit.to_string())))
    }

    fn note_budget(&mut self) {
        let v = self.budget.value();
        self.trace.budget(v);
    }

    /// Settles veto windows that closed before `at`, then runs the
    /// distillation check. Called at the start of every command.
    fn advance(&mut self, at: DateTime<Utc>) {
        self.last_at = at;
        let closed: Vec<usize> = self
            .under_review
            .iter()
            .copied()
            .filter(|&i| self.candidates[i].veto_deadline.is_some_and(|d| d < at))
            .collect();
        for i in closed {
            self.under_review.remove(&i);
            let id = self.candidates[i].id.clone();
            self.budget.settle(&id);
            self.candidates[i].closed_at = self.candidates[i].veto_deadline;
        }
        if self.in_flight.is_none() && self.budget.should_distill() {
            self.distill(at);
        }
    }

    fn would_advance(&self, at: DateTime<Utc>) -> bool {
        let settles = self
            .under_review
            .iter()
            .any(|&i| self.candidates[i].veto_deadline.is_some_and(|d| d < at));
        settles || (self.in_flight.is_none() && self.budget.should_distill())
    }

    // ---- sessions --------------------------------------------------------

    /// Prompt and commit a new session is served with. Read-only.
    pub fn prepare_session(&self, ephemeral: Option<&str>) -> SessionPlan {
        plan_session(
            &self.prompt,
            &self.serving_commit,
            self.serving_candidate(),
            ephemeral,
        )
    }

    /// The in-flight candidate, if its provisional state is what is served.
    pub fn serving_candidate(&self) -> Option<&str> {
        self.in_flight()
            .filter(|c| c.provisional_commit == self.serving_commit)
            .map(|c| c.id.as_str())
    }

    pub fn record_session(
        &mut self,
        input: SessionInput,
        at: DateTime<Utc>,
    ) -> Result<SessionRecord, EngineError> {
        if input.input.trim().is_empty() {
            return Err(EngineError::EmptyInput);
        }
        self.advance(at);
        self.session_seq += 1;
        let session = SessionRecord {
            id: fmt_id("s", self.session_seq),
            input: input.input,
            output: input.output,
            transcript: input.transcript,
            tool_log: input.tool_log,
            rating: None,
            comment: None,
            state_commit: input.state_commit,
            ephemeral_digest: input.ephemeral_digest,
            served_at: at,
            rated_at: None,
        };
        self.log(EngineEvent::Session {
            at,
            session: session.clone(),
        })?;
        self.counters.sessions += 1;
        self.note(
            AuditKind::Session,
            at,
            json!({
                "type": "session",
                "session_id": session.id,
                "state_commit": session.state_commit,
                "ephemeral_context": session.ephemeral_digest.is_some(),
            }),
        );
        self.sessions.insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn record_backbone_failure(&mut self, error: &str, at: DateTime<Utc>) {
        self.counters.backbone_failures += 1;
        self.note(
            AuditKind::Session,
            at,
            json!({"type": "backbone_failure", "error": error}),
        );
    }

    pub fn rate(
        &mut self,
        session_id: &str,
        rating: i64,
        comment: Option<String>,
        submitter: &str,
        at: DateTime<Utc>,
    ) -> Result<RatingOutcome, EngineError> {
        let Some(session) = self.sessions.get(session_id) else {
            return Err(EngineError::UnknownSession(session_id.to_string()));
        };
        if !(1..=5).contains(&rating) {
            return Err(EngineError::InvalidRating(rating));
        }
        if session.rating.is_some() {
            return Err(EngineError::AlreadyRated(session_id.to_string()));
        }
        let r = rating as u8;
        let served_by = session.state_commit.clone();
        self.advance(at);
        self.log(EngineEvent::Rating {
            at,
            session_id: session_id.to_string(),
            rating: r,
            comment: comment.clone(),
            submitter: submitter.to_string(),
        })?;
        let s = self.sessions.get_mut(session_id).expect("checked above");
        s.rating = Some(r);
        s.comment = comment;
        s.rated_at = Some(at);
        self.undistilled.push(session_id.to_string());
        self.counters.ratings += 1;

        self.buffer.push(r);
        let alarm = self.observe_drift(r);
        let mut status = Vec::new();

        let mut evaluation_scheduled = false;
        let mut progress = None;
        if let Some(i) = self.in_flight {
            let n_win = self.config.gate.n_win;
            let c = &mut self.candidates[i];
            let collecting = matches!(
                c.lifecycle,
                Lifecycle::Provisional | Lifecycle::RepairedProvisional
            ) && !c.evaluation_scheduled;
            let counted = collecting && served_by == c.provisional_commit;
            if counted {
                c.new_window.push(r);
                if c.new_window.len() == n_win {
                    c.evaluation_scheduled = true;
                    evaluation_scheduled = true;
                    self.pending.push_back(Work::Evaluate(i));
                    status.push("evaluation scheduled".to_string());
                }
            }
            progress = Some(CandidateProgress {
                id: c.id.clone(),
                lifecycle: c.lifecycle,
                collected: c.new_window.len(),
                needed: n_win,
                counted,
            });
        }

        let warm_up = !self.buffer.is_full();
        let mut reflection_scheduled = false;
        let mut reflection_dropped = false;
        if warm_up {
            status.push("warm-up".to_string());
        } else if self.in_flight.is_some() {
            reflection_dropped = true;
            self.counters.reflections_dropped += 1;
            status.push("reflection dropped: candidate in flight".to_string());
        } else if !self.pending.iter().any(|w| matches!(w, Work::Reflect(_))) {
            reflection_scheduled = true;
            self.pending.push_back(Work::Reflect(session_id.to_string()));
            status.push("reflection scheduled".to_string());
        }
        if status.is_empty() {
            status.push("recorded".to_string());
        }

        self.note(
            AuditKind::Session,
            at,
            json!({
                "type": "rating",
                "session_id": session_id,
                "rating": r,
                "submitter": submitter,
                "warm_up": warm_up,
                "candidate": progress.as_ref().map(|p| &p.id),
                "counted": progress.as_ref().is_some_and(|p| p.counted),
                "reflection_dropped": reflection_dropped,
            }),
        );
        if let Some(payload) = alarm {
            self.counters.alarms += 1;
            self.note(AuditKind::Alarm, at, payload);
        }
        Ok(RatingOutcome {
            session_id: session_id.to_string(),
            rating: r,
            warm_up,
            buffer_len: self.buffer.len(),
            buffer_capacity: self.buffer.capacity(),
            candidate: progress,
            evaluation_scheduled,
            reflection_scheduled,
            reflection_dropped,
            status,
        })
    }

    /// Convenience for single-threaded drivers: rate, then run the work the
    /// rating scheduled.
    pub fn rate_and_run(
        &mut self,
        session_id: &str,
        rating: i64,
        submitter: &str,
        at: DateTime<Utc>,
    ) -> Result<RatingOutcome, EngineError> {
        let out = self.rate(session_id, rating, None, submitter, at)?;
        self.run_pending(at)?;
        Ok(out)
    }

    /// Feeds the drift monitors; returns an alarm payload on alarm onset.
    fn observe_drift(&mut self, r: u8) -> Option<Value> {
        let mut onset = None;
        match self.drift {
            None if self.buffer.is_full() => {
                self.drift = Some(self.config.drift.calibrate(&self.buffer.snapshot()));
            }
            None => {}
            Some(m) => {
                let next = m.update(r);
                if next.alarm() && !m.alarm() {
                    onset = Some(json!({
                        "ewma": next.ewma_value,
                        "ewma_limit": next.ewma_limit(),
                        "ewma_alarm": next.ewma_alarm,
                        "cusum_neg": next.cusum_neg,
                        "cusum_h": next.params.h,
                        "cusum_alarm": next.cusum_alarm,
                        "mu0": next.mu0,
                        "sigma0": next.sigma0,
                    }));
                }
                self.drift = Some(next);
            }
        }
        if self.config.metric_history > 0 {
            if self.metrics.len() == self.config.metric_history {
                self.metrics.pop_front();
            }
            self.metrics.push_back(MetricPoint {
                rating_seq: self.counters.ratings,
                at: self.last_at,
                rating: r,
                window_mean: self.buffer.mean(),
                ewma: self.drift.map(|d| d.ewma_value),
                ewma_limit: self.drift.map(|d| d.ewma_limit()),
                cusum_neg: self.drift.map(|d| d.cusum_neg),
                alarm: self.drift.is_some_and(|d| d.alarm()),
            });
        }
        onset
    }

    // ---- background work -------------------------------------------------

    pub fn run_pending(&mut self, at: DateTime<Utc>) -> Result<(), EngineError> {
        while let Some(work) = self.pending.pop_front() {
            match work {
                Work::Evaluate(i) => self.evaluate(i, at)?,
                Work::Reflect(session) => self.reflect(&session, at)?,
            }
        }
        Ok(())
    }

    fn reflect(&mut self, session_id: &str, at: DateTime<Utc>) -> Result<(), EngineError> {
        if self.in_flight.is_some() || !self.buffer.is_full() {
            self.counters.reflections_dropped += 1;
            return Ok(());
        }
        let Some(session) = self.sessions.get(session_id) else {
            return Ok(());
        };
        let request = ReflectionRequest {
            session_id: session_id.to_string(),
            transcript: session.effective_transcript(),
            tool_log: session.tool_log.clone(),
            rating_window: self.buffer.snapshot(),
            veto_flags: self.veto_flags.clone(),
        };
        self.counters.reflections += 1;
        let result = self.reflector.reflect(&request);
        self.log(EngineEvent::Reflected {
            session_id: session_id.to_string(),
            result: result.as_ref().map(|r| r.output.clone()).map_err(Clone::clone),
        })?;
        let engine = self.reflector.name().to_string();
        let reflection = match result {
            Ok(r) => r,
            Err(e) => {
                self.counters.reflection_failures += 1;
                self.note(
                    AuditKind::Reflection,
                    at,
                    json!({"session_id": session_id, "engine": engine, "outcome": "error", "error": e}),
                );
                return Ok(());
            }
        };
        let exchange = reflection.exchange.clone();
        let output = reflection.output;
        let mut payload = json!({
            "session_id": session_id,
            "engine": engine,
            "calls": output.calls,
            "rationale": output.rationale,
            "exchange": exchange,
        });
        let outcome: Result<String, Value> = (|| {
            output.validate().map_err(|e| json!({"invalid_output": e}))?;
            if output.calls.is_empty() {
                return Ok("no_op".to_string());
            }
            let cid = fmt_id("c", self.candidates.len() as u64 + 1);
            let ctx = ParseContext {
                now: at,
                proposer: Proposer::Reflection,
                id_salt: &cid,
                rationale: output.rationale.clone(),
            };
            let delta = parse_self_mod_calls(&output.calls, &self.serving, &ctx)
                .map_err(|e| json!({"parse_error": e.to_string()}))?;
            if delta.is_empty() {
                return Ok("no_op".to_string());
            }
            self.open(delta, output.calls.clone(), Some(session_id.to_string()), at)
                .map_err(|e| json!({"open_failed": e.to_string()}))
        })();
        match outcome {
            Ok(s) if s == "no_op" => payload["outcome"] = json!("no_op"),
            Ok(cid) => {
                payload["outcome"] = json!("candidate_opened");
                payload["candidate_id"] = json!(cid);
            }
            Err(err) => {
                self.counters.reflection_failures += 1;
                payload["outcome"] = json!("rejected");
                payload["error"] = err;
            }
        }
        self.note(AuditKind::Reflection, at, payload);
        Ok(())
    }

    /// Opens a candidate outside the reflection path (operator-proposed
    /// deltas, tests).
    pub fn propose(
        &mut self,
        delta: KnowledgeDelta,
        calls: Vec<SelfModCall>,
        at: DateTime<Utc>,
    ) -> Result<String, EngineError> {
        if !self.buffer.is_full() {
            return Err(EngineError::WarmupIncomplete {
                have: self.buffer.len(),
                need: self.buffer.capacity(),
            });
        }
        if let Some(i) = self.in_flight {
            return Err(EngineError::CandidateInFlight(self.candidates[i].id.clone()));
        }
        delta.check_rationale()?;
        // Only logged once it is known to apply, so replay never trips on it.
        apply_delta(&self.serving, &delta)?;
        self.log(EngineEvent::Propose {
            at,
            delta: delta.clone(),
            calls: calls.clone(),
        })?;
        self.advance(at);
        let id = self.open(delta, calls, None, at)?;
        self.note(
            AuditKind::Reflection,
            at,
            json!({"type": "manual_proposal", "candidate_id": id}),
        );
        Ok(id)
    }

    fn open(
        &mut self,
        delta: KnowledgeDelta,
        calls: Vec<SelfModCall>,
        origin_session: Option<String>,
        at: DateTime<Utc>,
    ) -> Result<String, EngineError> {
        if !self.buffer.is_full() {
            return Err(EngineError::WarmupIncomplete {
                have: self.buffer.len(),
                need: self.buffer.capacity(),
            });
        }
        if let Some(i) = self.in_flight {
            return Err(EngineError::CandidateInFlight(self.candidates[i].id.clone()));
        }
        delta.check_rationale()?;
        let id = fmt_id("c", self.candidates.len() as u64 + 1);
        let base = self.serving.clone();
        let base_commit = self.serving_commit.clone();
        let (applied, state) = self.deploy(&base, &delta, &id, at)?;
        let commit = self.commit(&state, Author::System, CommitReason::Provisional, Some(&id), at)?;
        self.serve(Arc::new(state), commit.clone());
        let mut c = Candidate {
            id: id.clone(),
            origin_session,
            delta,
            calls,
            applied_delta: applied,
            repair: None,
            repair_calls: Vec::new(),
            base_commit,
            provisional_commit: commit,
            lifecycle: Lifecycle::Proposed,
            repair_count: 0,
            prev_window: self.buffer.snapshot(),
            new_window: Vec::new(),
            evaluation_scheduled: false,
            decisions: Vec::new(),
            veto_deadline: None,
            accepted_commit: None,
            quarantine_commit: None,
            credited_size: 0,
            opened_at: at,
            closed_at: None,
            note: None,
        };
        c.transition(Lifecycle::Provisional)?;
        self.by_id.insert(id.clone(), self.candidates.len());
        self.in_flight = Some(self.candidates.len());
        self.candidates.push(c);
        self.counters.candidates += 1;
        Ok(id)
    }

    /// Applies `delta` to `base` and runs the unit-test gate for every tool
    /// it creates; activations are appended to the returned delta.
    fn deploy(
        &mut self,
        base: &KnowledgeState,
        delta: &KnowledgeDelta,
        candidate: &str,
        at: DateTime<Utc>,
    ) -> Result<(KnowledgeDelta, KnowledgeState), EngineError> {
        let mut state = apply_delta(base, delta)?;
        let mut applied = delta.clone();
        for name in created_tools(delta) {
            if state.tool(&name).map(|t| t.status) != Some(ToolStatus::Quarantined) {
                continue;
            }
            let mut rec = Recording {
                inner: self.runner.as_mut(),
                seen: Vec::new(),
            };
            let result = register_tool(&state, &name, &mut rec, &self.config.tools, at);
            let seen = std::mem::take(&mut rec.seen);
            for (tool, result) in seen {
                self.log(EngineEvent::ToolRun { tool, result })?;
            }
            let payload = match result {
                Ok(Registration::Activated { delta: act, output }) => {
                    state = apply_delta(&state, &act)?;
                    applied = applied.then(act);
                    self.counters.tools_activated += 1;
                    json!({"tool": name, "candidate_id": candidate, "outcome": "activated", "output": output})
                }
                Ok(Registration::Quarantined {
                    failure_diff,
                    diff_path,
                }) => {
                    self.counters.tools_quarantined += 1;
                    json!({
                        "tool": name, "candidate_id": candidate, "outcome": "quarantined",
                        "failure_diff": failure_diff, "diff_path": diff_path,
                    })
                }
                Err(e) => {
                    self.counters.tools_quarantined += 1;
                    json!({"tool": name, "candidate_id": candidate, "outcome": "quarantined", "error": e})
                }
            };
            self.note(AuditKind::Tool, at, payload);
        }
        Ok((applied, state))
    }

    fn evaluate(&mut self, i: usize, at: DateTime<Utc>) -> Result<(), EngineError> {
        let c = &self.candidates[i];
        if !matches!(c.lifecycle, Lifecycle::Provisional | Lifecycle::RepairedProvisional)
            || c.new_window.len() < self.config.gate.n_win
        {
            return Ok(());
        }
        let prev = Sample::from_ratings(&c.prev_window).expect("window ratings are valid");
        let new = Sample::from_ratings(&c.new_window).expect("window ratings are valid");
        let decision = gate::decide(&c.id, c.repair_count, &prev, &new, &self.config.gate, at)
            .expect("full windows always admit a test");
        self.trace.decision(&decision);
        self.counters.decisions += 1;
        if decision.accepted {
            self.counters.accepted_decisions += 1;
        }
        self.decisions.push(decision.clone());
        self.candidates[i].decisions.push(decision.clone());
        self.note(AuditKind::Gate, at, serde_json::to_value(&decision).expect("decision serializes"));

        if decision.accepted {
            self.accept(i, at)
        } else if self.candidates[i].repair_count == 0 {
            self.repair(i, &decision, at)
        } else {
            self.roll_back(i, at)
        }
    }

    fn accept(&mut self, i: usize, at: DateTime<Utc>) -> Result<(), EngineError> {
        self.candidates[i].transition(Lifecycle::Accepted)?;
        let id = self.candidates[i].id.clone();
        let state = self.serving.clone();
        let commit = self.commit(&state, Author::System, CommitReason::Accept, Some(&id), at)?;
        self.store_mut()
            .tag_commit(&commit, &format!("good-{id}"), TagKind::Good)?;
        self.serve(state, commit.clone());
        let size = delta_size(&self.candidates[i].applied_delta) as u64;
        let c = &mut self.candidates[i];
        c.accepted_commit = Some(commit);
        c.veto_deadline = Some(at + self.config.gate.review_window());
        c.credited_size = size;
        c.evaluation_scheduled = false;
        let new_window = c.new_window.clone();
        self.budget
            .credit(&id, size)
            .expect("each candidate is credited once");
        self.note_budget();
        self.under_review.insert(i);
        self.in_flight = None;
        self.counters.accepted += 1;
        // The accepted state is the new baseline for drift monitoring.
        self.drift = Some(self.config.drift.calibrate(&new_window));
        Ok(())
    }

    fn repair(&mut self, i: usize, decision: &GateDecision, at: DateTime<Utc>) -> Result<(), EngineError> {
        self.candidates[i].transition(Lifecycle::RepairPending)?;
        let c = &self.candidates[i];
        let id = c.id.clone();
        let request = RepairRequest {
            candidate_id: id.clone(),
            failed_calls: c.calls.clone(),
            mean_prev: decision.mean_prev,
            mean_new: decision.mean_new,
            p_value: decision.p_value,
            rating_window: self.buffer.snapshot(),
            veto_flags: self.veto_flags.clone(),
        };
        let result = self.reflector.repair(&request);
        self.log(EngineEvent::Repaired {
            candidate_id: id.clone(),
            result: result.as_ref().map(|r| r.output.clone()).map_err(Clone::clone),
        })?;
        let base = self.state_of(&self.candidates[i].base_commit)?;

        // A repair the engine could not produce falls back to resubmitting
        // the original change, which still gets its one re-evaluation.
        let proposed: Result<(KnowledgeDelta, Vec<SelfModCall>, Value), String> = match &result {
            Err(e) => Err(e.to_string()),
            Ok(r) if r.output.calls.is_empty() => Err("engine proposed no repair".into()),
            Ok(r) => {
                let ctx = ParseContext {
                    now: at,
                    proposer: Proposer::Repair,
                    id_salt: &format!("{id}/repair"),
                    rationale: r.output.rationale.clone(),
                };
                parse_self_mod_calls(&r.output.calls, &base, &ctx)
                    .map_err(|e| e.to_string())
                    .and_then(|d| {
                        if d.is_empty() {
                            Err("repair delta is empty".into())
                        } else {
                            Ok((d, r.output.calls.clone(), json!(r.output.rationale)))
                        }
                    })
            }
        };
        let (source, (delta, calls, rationale), fallback_reason) = match proposed {
            Ok(p) => ("engine", p, None),
            Err(reason) => {
                let c = &self.candidates[i];
                let mut d = c.delta.clone();
                d.proposed_by = Proposer::Repair;
                d.rationale.insert("kind".into(), json!("resubmission"));
                d.rationale.insert("reason".into(), json!(reason));
                ("resubmission", (d, c.calls.clone(), Value::Null), Some(reason))
            }
        };
        let deployed = self.deploy(&base, &delta, &id, at);
        let (applied, state) = match deployed {
            Ok(x) => x,
            Err(e) => {
                self.note(
                    AuditKind::Repair,
                    at,
                    json!({"candidate_id": id, "outcome": "failed", "error": e.to_string()}),
                );
                return self.roll_back_from(i, Lifecycle::RepairPending, at);
            }
        };
        let commit = self.commit(&state, Author::System, CommitReason::Repair, Some(&id), at)?;
        self.serve(Arc::new(state), commit.clone());
        let c = &mut self.candidates[i];
        c.repair = Some(delta);
        c.repair_calls = calls;
        c.applied_delta = applied;
        c.provisional_commit = commit.clone();
        c.repair_count = 1;
        c.new_window.clear();
        c.evaluation_scheduled = false;
        c.transition(Lifecycle::RepairedProvisional)?;
        self.counters.repairs += 1;
        self.note(
            AuditKind::Repair,
            at,
            json!({
                "candidate_id": id,
                "outcome": "deployed",
                "source": source,
                "fallback_reason": fallback_reason,
                "calls": self.candidates[i].repair_calls,
                "rationale": rationale,
                "provisional_commit": commit,
            }),
        );
        Ok(())
    }

    fn roll_back(&mut self, i: usize, at: DateTime<Utc>) -> Result<(), EngineError> {
        let from = self.candidates[i].lifecycle;
        self.roll_back_from(i, from, at)
    }

    /// Keeps the faulty state as a quarantine commit, then restores the
    /// candidate's base state.
    fn roll_back_from(&mut self, i: usize, _from: Lifecycle, at: DateTime<Utc>) -> Result<(), EngineError> {
        let id = self.candidates[i].id.clone();
        let faulty = self.serving.clone();
        let q = self.commit(&faulty, Author::System, CommitReason::Quarantine, Some(&id), at)?;
        self.store_mut()
            .tag_commit(&q, &format!("quarantine-{id}"), TagKind::Quarantine)?;
        let base = self.candidates[i].base_commit.clone();
        let revert = self.store_mut().revert_to(
            &base,
            CommitMeta::system(CommitReason::Rollback, Some(&id), at),
        )?;
        self.trace.commit(&revert.commit.id);
        self.serve(revert.state.clone(), revert.commit.id.clone());
        let c = &mut self.candidates[i];
        c.quarantine_commit = Some(q.clone());
        c.closed_at = Some(at);
        c.evaluation_scheduled = false;
        c.transition(Lifecycle::RolledBack)?;
        self.in_flight = None;
        self.counters.rolled_back += 1;
        self.note(
            AuditKind::Rollback,
            at,
            json!({
                "candidate_id": id,
                "cause": "second gate failure",
                "quarantine_commit": q,
                "restored_commit": revert.commit.id,
                "state_hash": revert.commit.state_hash,
            }),
        );
        Ok(())
    }

    /// Drops the in-flight candidate because the state it was built on is
    /// being replaced.
    fn preempt(&mut self, cause: &str, at: DateTime<Utc>) -> Result<Option<String>, EngineError> {
        let Some(i) = self.in_flight.take() else {
            return Ok(None);
        };
        self.pending.retain(|w| !matches!(w, Work::Evaluate(j) if *j == i));
        let c = &mut self.candidates[i];
        c.transition(Lifecycle::RolledBack)?;
        c.closed_at = Some(at);
        c.evaluation_scheduled = false;
        c.note = Some(format!("preempted: {cause}"));
        self.counters.preempted += 1;
        Ok(Some(c.id.clone()))
    }

    // ---- governance ------------------------------------------------------

    /// Vetoes an accepted candidate inside its review window (deadline
    /// inclusive). Accepted candidates built on top of it are vetoed with it
    /// and an in-flight candidate is preempted.
    pub fn veto(&mut self, candidate_id: &str, actor: &str, at: DateTime<Utc>) -> Result<VetoOutcome, EngineError> {
        let &i = self
            .by_id
            .get(candidate_id)
            .ok_or_else(|| EngineError::UnknownCandidate(candidate_id.to_string()))?;
        let c = &self.candidates[i];
        if c.lifecycle != Lifecycle::Accepted {
            return Err(EngineError::NotAccepted {
                id: c.id.clone(),
                lifecycle: c.lifecycle,
            });
        }
        let deadline = c.veto_deadline.expect("accepted candidates have a deadline");
        if at > deadline {
            return Err(EngineError::VetoWindowClosed {
                id: c.id.clone(),
                deadline,
            });
        }
        self.log(EngineEvent::Veto {
            at,
            candidate_id: candidate_id.to_string(),
            actor: actor.to_string(),
        })?;
        self.advance(at);
        let preempted = self.preempt(&format!("veto of {candidate_id}"), at)?;
        let mut vetoed: Vec<usize> = self.under_review.range(i..).copied().collect();
        vetoed.reverse();
        let mut cascaded = Vec::new();
        for &j in &vetoed {
            let c = &mut self.candidates[j];
            c.transition(Lifecycle::Vetoed)?;
            c.closed_at = Some(at);
            let id = c.id.clone();
            let calls = c.current_calls().to_vec();
            self.budget.debit(&id).expect("accepted candidates under review hold a credit");
            self.under_review.remove(&j);
            self.veto_flags.push(VetoFlag {
                candidate_id: id.clone(),
                calls,
                vetoed_at: at,
            });
            self.counters.vetoed += 1;
            if j != i {
                cascaded.push(id);
            }
        }
        cascaded.reverse();
        self.note_budget();
        let base = self.candidates[i].base_commit.clone();
        let revert = self.store_mut().revert_to(
            &base,
            CommitMeta {
                author: Author::Admin,
                candidate_id: Some(candidate_id.to_string()),
                reason: CommitReason::Veto,
                timestamp: at,
            },
        )?;
        self.trace.commit(&revert.commit.id);
        self.serve(revert.state.clone(), revert.commit.id.clone());
        let outcome = VetoOutcome {
            candidate_id: candidate_id.to_string(),
            cascaded,
            preempted,
            restored_commit: revert.commit.id.clone(),
            state_hash: revert.commit.state_hash.clone(),
            budget: self.budget.value(),
        };
        self.note(
            AuditKind::Veto,
            at,
            json!({"actor": actor, "outcome": outcome}),
        );
        Ok(outcome)
    }

    /// Restores the state named by a tag or commit id as a new commit.
    pub fn revert(&mut self, reference: &str, actor: &str, at: DateTime<Utc>) -> Result<RevertOutcome, EngineError> {
        let tag_kind = {
            let store = self.store();
            store.resolve(reference)?;
            store.tag(reference).map(|t| t.kind)
        };
        self.log(EngineEvent::Revert {
            at,
            reference: reference.to_string(),
            actor: actor.to_string(),
        })?;
        self.advance(at);
        let preempted = self.preempt(&format!("manual revert to {reference}"), at)?;
        let revert = self.store_mut().revert_to(
            reference,
            CommitMeta {
                author: Author::Admin,
                candidate_id: None,
                reason: CommitReason::Rollback,
                timestamp: at,
            },
        )?;
        self.trace.commit(&revert.commit.id);
        self.serve(revert.state.clone(), revert.commit.id.clone());
        self.counters.reverts += 1;
        let outcome = RevertOutcome {
            reference: reference.to_string(),
            commit: revert.commit.id.clone(),
            state_hash: revert.commit.state_hash.clone(),
            tag_kind,
            preempted,
        };
        self.note(
            AuditKind::Rollback,
            at,
            json!({
                "actor": actor,
                "cause": "manual revert",
                "outcome": outcome,
                "flagged_quarantine_target": tag_kind == Some(TagKind::Quarantine),
            }),
        );
        Ok(outcome)
    }

    /// Settles closed veto windows and runs the distillation check. Does
    /// nothing, and records nothing, when neither applies.
    pub fn tick(&mut self, at: DateTime<Utc>) -> Result<bool, EngineError> {
        if !self.would_advance(at) {
            return Ok(false);
        }
        self.log(EngineEvent::Tick { at })?;
        self.advance(at);
        Ok(true)
    }

    fn distill(&mut self, at: DateTime<Utc>) {
        self.distill_seq += 1;
        let n = self.distill_seq;
        let rows: Result<Vec<DatasetRow>, _> = {
            let store = self.store();
            let sessions = self.undistilled.iter().filter_map(|id| self.sessions.get(id));
            compile_dataset(sessions, None, |c| store.get(c).is_some()).map(|mut rows| {
                if self.config.inline_prompts {
                    for r in &mut rows {
                        r.prompt = store
                            .state(&r.state_commit)
                            .map(|s| compose_prompt(&s, self.config.prompt_budget).text);
                    }
                }
                rows
            })
        };
        let (row_count, weight_sum, export) = match rows {
            Ok(rows) => {
                let weight_sum: f64 = rows.iter().map(|r| r.weight).sum();
                let export = match &self.config.distill_dir {
                    Some(dir) if !rows.is_empty() => {
                        let path = dir.join(format!("dataset-{n:04}.ndjson"));
                        let config = serde_json::to_value(&self.config).expect("config serializes");
                        match export_dataset(&rows, &path, config, at) {
                            Ok(m) => json!({"path": path, "manifest": m}),
                            Err(e) => json!({"error": e}),
                        }
                    }
                    Some(_) => json!({"error": "dataset is empty"}),
                    None => Value::Null,
                };
                (rows.len(), weight_sum, export)
            }
            Err(e) => (0, 0.0, json!({"error": e})),
        };
        let before = self.budget.value();
        let cleared = self.budget.reset();
        self.note_budget();
        for id in std::mem::take(&mut self.undistilled) {
            self.retired.push_back(id);
        }
        while self.retired.len() > self.config.session_retention {
            if let Some(old) = self.retired.pop_front() {
                self.sessions.remove(&old);
            }
        }
        self.counters.distillations += 1;
        self.note(
            AuditKind::Distill,
            at,
            json!({
                "distillation": n,
                "budget_before": before,
                "cleared": cleared,
                "budget_after": self.budget.value(),
                "threshold": self.budget.threshold(),
                "rows": row_count,
                "weight_sum": weight_sum,
                "export": export,
            }),
        );
    }

    // ---- snapshots -------------------------------------------------------

    pub fn snapshot(&self) -> EngineSnapshot {
        let now = self.last_at;
        let window = self.buffer.snapshot();
        let values: Vec<f64> = window.iter().map(|&r| f64::from(r)).collect();
        let tool_review = self
            .serving
            .tools()
            .iter()
            .filter(|t| t.status == ToolStatus::Quarantined)
            .map(|t| ToolReview {
                tool: t.clone(),
                failure_diff: read_failure_diff(&self.config.tools, t),
            })
            .collect();
        EngineSnapshot {
            at: now,
            state: self.serving.clone(),
            prompt: self.prompt.clone(),
            serving_commit: self.serving_commit.clone(),
            serving_candidate: self.serving_candidate().map(str::to_string),
            warm_up: !self.buffer.is_full(),
            buffer: window,
            buffer_capacity: self.buffer.capacity(),
            prior_mean: gate::PRIOR_MEAN,
            window_mean: self.buffer.mean(),
            window_ci95: mean_ci95(&values),
            drift: self.drift,
            budget: BudgetView {
                value: self.budget.value(),
                threshold: self.budget.threshold(),
                settled: self.budget.settled(),
                under_review: self.budget.under_review(),
            },
            counters: self.counters.clone(),
            gate: self.config.gate,
            in_flight: self.in_flight().map(|c| c.id.clone()),
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateView::new(c, &self.config.gate, now))
                .collect(),
            decisions: self.decisions.clone(),
            metrics: self.metrics.iter().copied().collect(),
            tool_review,
            trace_fingerprint: self.trace.fingerprint(),
        }
    }

    /// Moves the engine onto durable storage after an in-memory replay.
    /// `store` may lag behind the replayed history (a crash between logging
    /// an event and committing its effect); missing commits are written.
    pub fn attach(
        &mut self,
        mut store: CommitStore,
        audit: AuditLog,
        events: EventLog,
    ) -> Result<usize, EngineError> {
        let written = store.catch_up(&self.store())?;
        *self.store_mut() = store;
        self.audit = audit;
        self.events = events;
        Ok(written)
    }

    /// Swaps the reflection engine and test runner, e.g. after a replay
    /// that ran on recorded observations.
    pub fn set_collaborators(&mut self, reflector: Box<dyn ReflectionEngine>, runner: Box<dyn TestRunner>) {
        self.reflector = reflector;
        self.runner = runner;
    }
}

pub fn plan_session(
    prompt: &ComposedPrompt,
    commit: &str,
    candidate: Option<&str>,
    ephemeral: Option<&str>,
) -> SessionPlan {
    let ephemeral = ephemeral.filter(|c| !c.trim().is_empty());
    SessionPlan {
        full_prompt: prompt.with_ephemeral(ephemeral),
        prompt: prompt.clone(),
        state_commit: commit.to_string(),
        candidate_id: candidate.map(str::to_string),
        ephemeral_digest: ephemeral.map(|c| digest_hex(c.as_bytes())),
    }
}

/// Rebuilds an engine from its event log. Observations in the log stand in
/// for the reflection engine and the tool runner. With `config` given, it
/// must match the configuration the log was recorded under.
pub fn replay(
    events: &[EngineEvent],
    config: Option<EngineConfig>,
    store: CommitStore,
    audit: AuditLog,
    log: EventLog,
) -> Result<Engine, EngineError> {
    let mut iter = events.iter().filter(|e| !e.is_observation());
    let Some(EngineEvent::Genesis {
        at,
        state,
        config: recorded,
    }) = iter.next()
    else {
        return Err(EngineError::Replay("event log does not start with genesis".into()));
    };
    let config = match (config, recorded) {
        (Some(given), Some(rec)) if &given != rec => {
            return Err(EngineError::Replay(
                "configuration differs from the one the log was recorded under".into(),
            ))
        }
        (Some(given), _) => given,
        (None, Some(rec)) => rec.clone(),
        (None, None) => {
            return Err(EngineError::Replay("log records no configuration; pass one".into()))
        }
    };
    let (reflector, runner) = events::scripted_collaborators(events);
    let parts = EngineParts {
        store,
        audit,
        events: log,
        reflector: Box::new(reflector),
        runner: Box::new(runner),
    };
    let mut engine = Engine::new(config, parts, state.clone(), *at)?;
    for event in iter {
        match event {
            EngineEvent::Genesis { .. } => {
                return Err(EngineError::Replay("second genesis event".into()))
            }
            EngineEvent::Session { at, session } => {
                let s = engine.record_session(
                    SessionInput {
                        input: session.input.clone(),
                        output: session.output.clone(),
                        transcript: session.transcript.clone(),
                        tool_log: session.tool_log.clone(),
                        state_commit: session.state_commit.clone(),
                        ephemeral_digest: session.ephemeral_digest.clone(),
                    },
                    *at,
                )?;
                if s.id != session.id {
                    return Err(EngineError::Replay(format!(
                        "session id {} where the log has {}",
                        s.id, session.id
                    )));
                }
            }
            EngineEvent::Rating {
                at,
                session_id,
                rating,
                comment,
                submitter,
            } => {
                engine.rate(session_id, i64::from(*rating), comment.clone(), submitter, *at)?;
                engine.run_pending(*at)?;
            }
            EngineEvent::Veto {
                at,
                candidate_id,
                actor,
            } => {
                engine.veto(candidate_id, actor, *at)?;
            }
            EngineEvent::Revert {
                at,
                reference,
                actor,
            } => {
                engine.revert(reference, actor, *at)?;
            }
            EngineEvent::Tick { at } => {
                engine.tick(*at)?;
            }
            EngineEvent::Propose { at, delta, calls } => {
                engine.propose(delta.clone(), calls.clone(), *at)?;
            }
            EngineEvent::Reflected { .. } | EngineEvent::Repaired { .. } | EngineEvent::ToolRun { .. } => {}
        }
    }
    Ok(engine)
}
