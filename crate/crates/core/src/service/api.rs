//! `/v1` routes.
//!
//! | method | path | role |
//! |---|---|---|
//! | POST | /v1/sessions | operator |
//! | POST | /v1/sessions/{id}/rating | operator |
//! | GET | /v1/sessions/{id} | operator |
//! | GET | /v1/state[?ref=] | operator |
//! | GET | /v1/candidates, /v1/candidates/{id} | operator |
//! | GET | /v1/gate/decisions | operator |
//! | GET | /v1/diff/{a}/{b} | operator |
//! | GET | /v1/metrics | operator |
//! | GET | /v1/tools/review | operator |
//! | GET | /v1/commits, /v1/tags | operator |
//! | GET | /v1/audit[?from=&to=&kind=] | admin |
//! | POST | /v1/candidates/{id}/veto | admin |
//! | POST | /v1/revert/{tag} | admin |
//!
//! The admin token is accepted wherever the operator token is. Errors are
//! `{"error": <code>, "message": <text>}`.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::AppState;
use crate::engine::{CandidateView, EngineError, SessionInput};
use crate::gate::{GateConfig, GateDecision};
use crate::reflection::{Message, ToolLogEntry};
use crate::store::{AuditKind, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Role {
    Operator,
    Admin,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Operator => "operator",
            Role::Admin => "admin",
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use EngineError as E;
        let (status, code) = match &e {
            E::UnknownSession(_) | E::UnknownCandidate(_) => (StatusCode::NOT_FOUND, "not_found"),
            E::Store(StoreError::UnknownRef(_)) => (StatusCode::NOT_FOUND, "unknown_ref"),
            E::AlreadyRated(_) => (StatusCode::CONFLICT, "already_rated"),
            E::VetoWindowClosed { .. } => (StatusCode::CONFLICT, "veto_window_closed"),
            E::NotAccepted { .. } => (StatusCode::CONFLICT, "not_accepted"),
            E::CandidateInFlight(_) => (StatusCode::CONFLICT, "candidate_in_flight"),
            E::WarmupIncomplete { .. } => (StatusCode::CONFLICT, "warm_up"),
            E::InvalidRating(_) | E::EmptyInput | E::Delta(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        EngineError::Store(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), "invalid_body", r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn authorize(state: &AppState, headers: &HeaderMap, need: Role) -> Result<Role, ApiError> {
    let token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "bearer token required"))?;
    let role = if token == state.roles.admin {
        Role::Admin
    } else if token == state.roles.operator {
        Role::Operator
    } else {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "unknown token"));
    };
    if role < need {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            format!("{} role required", need.name()),
        ));
    }
    Ok(role)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/rating", post(rate_session))
        .route("/v1/state", get(get_state))
        .route("/v1/candidates", get(list_candidates))
        .route("/v1/candidates/{id}", get(get_candidate))
        .route("/v1/candidates/{id}/veto", post(veto))
        .route("/v1/gate/decisions", get(decisions))
        .route("/v1/diff/{a}/{b}", get(diff))
        .route("/v1/metrics", get(metrics))
        .route("/v1/tools/review", get(tool_review))
        .route("/v1/commits", get(commits))
        .route("/v1/tags", get(tags))
        .route("/v1/audit", get(audit))
        .route("/v1/revert/{tag}", post(revert))
        .with_state(state)
}

// ---- sessions ---------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub input: String,
    #[serde(default)]
    pub ephemeral_context: Option<String>,
    /// Full conversation, when the caller ran more than one turn. Defaults
    /// to the input and the backbone output.
    #[serde(default)]
    pub transcript: Option<Vec<Message>>,
    #[serde(default)]
    pub tool_log: Vec<ToolLogEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub output: String,
    pub state_commit: String,
    pub candidate_id: Option<String>,
    pub prompt_tokens: usize,
    pub prompt_over_budget: bool,
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<SessionCreated> {
    authorize(&state, &headers, Role::Operator)?;
    let Json(req) = body?;
    if req.input.trim().is_empty() {
        return Err(EngineError::EmptyInput.into());
    }
    // Planned by the writer so that the session sees every earlier command,
    // including the gate evaluations those commands scheduled.
    let ephemeral = req.ephemeral_context.clone();
    let plan = state
        .writer
        .call(move |e| e.prepare_session(ephemeral.as_deref()))
        .await;
    let backbone = state.backbone.clone();
    let (prompt, hash, input) = (plan.full_prompt.clone(), plan.prompt.state_hash.clone(), req.input.clone());
    let generated = tokio::task::spawn_blocking(move || backbone.generate(&prompt, &hash, &input))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let output = match generated {
        Ok(o) => o,
        Err(e) => {
            let msg = e.to_string();
            let at = state.clock.now();
            state
                .writer
                .call(move |eng| eng.record_backbone_failure(&msg, at.max(eng.last_event_at())))
                .await;
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "backbone_unavailable", e.to_string()));
        }
    };
    let transcript = req
        .transcript
        .unwrap_or_else(|| vec![Message::new("user", &req.input), Message::new("assistant", &output)]);
    let input = SessionInput {
        input: req.input,
        output: output.clone(),
        transcript,
        tool_log: req.tool_log,
        state_commit: plan.state_commit.clone(),
        ephemeral_digest: plan.ephemeral_digest.clone(),
    };
    let at = state.clock.now();
    let session = state
        .writer
        .call(move |e| {
            let at = at.max(e.last_event_at());
            e.record_session(input, at)
        })
        .await?;
    Ok(Json(SessionCreated {
        session_id: session.id,
        output,
        state_commit: plan.state_commit,
        candidate_id: plan.candidate_id,
        prompt_tokens: plan.prompt.tokens,
        prompt_over_budget: plan.prompt.over_budget,
    }))
}

async fn get_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let found = state
        .writer
        .call(move |e| e.session(&id).cloned().ok_or(EngineError::UnknownSession(id)))
        .await?;
    Ok(Json(serde_json::to_value(found).expect("session serializes")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSession {
    pub rating: i64,
    #[serde(default)]
    pub comment: Option<String>,
    /// Who gave the rating (end user or operator); defaults to the role.
    #[serde(default)]
    pub submitter: Option<String>,
}

async fn rate_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Result<Json<RateSession>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let role = authorize(&state, &headers, Role::Operator)?;
    let Json(req) = body?;
    let submitter = match req.submitter {
        Some(s) => format!("{}:{s}", role.name()),
        None => role.name().to_string(),
    };
    let at = state.clock.now();
    let out = state
        .writer
        .call(move |e| {
            let at = at.max(e.last_event_at());
            e.rate(&id, req.rating, req.comment, &submitter, at)
        })
        .await?;
    Ok(Json(serde_json::to_value(out).expect("outcome serializes")))
}

// ---- reads ------------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct StateQuery {
    #[serde(rename = "ref")]
    pub reference: Option<String>,
}

async fn get_state(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<StateQuery>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let snap = state.snapshot();
    if let Some(r) = q.reference {
        let store = state.store.read().expect("store lock");
        let commit = store.resolve(&r)?.clone();
        let ks = store.state(&commit.id).expect("resolved commits have states");
        return Ok(Json(json!({"commit": commit, "state": ks})));
    }
    Ok(Json(json!({
        "serving_commit": snap.serving_commit,
        "serving_candidate": snap.serving_candidate,
        "state": snap.state,
        "prompt": snap.prompt,
        "warm_up": snap.warm_up,
        "trace_fingerprint": snap.trace_fingerprint,
    })))
}

#[derive(Debug, Serialize)]
struct CandidateList {
    server_time: DateTime<Utc>,
    in_flight: Option<String>,
    candidates: Vec<CandidateView>,
}

fn views_at(state: &AppState) -> CandidateList {
    let snap = state.snapshot();
    let now = state.clock.now();
    CandidateList {
        server_time: now,
        in_flight: snap.in_flight.clone(),
        candidates: snap
            .candidates
            .iter()
            .map(|v| CandidateView::new(&v.candidate, &snap.gate, now))
            .collect(),
    }
}

async fn list_candidates(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    Ok(Json(serde_json::to_value(views_at(&state)).expect("views serialize")))
}

async fn get_candidate(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let list = views_at(&state);
    let view = list
        .candidates
        .into_iter()
        .find(|v| v.candidate.id == id)
        .ok_or(EngineError::UnknownCandidate(id))?;
    Ok(Json(json!({"server_time": list.server_time, "candidate": view})))
}

#[derive(Debug, Serialize)]
struct DecisionList {
    gate: GateConfig,
    decisions: Vec<GateDecision>,
}

async fn decisions(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let snap = state.snapshot();
    Ok(Json(
        serde_json::to_value(DecisionList {
            gate: snap.gate,
            decisions: snap.decisions.clone(),
        })
        .expect("decisions serialize"),
    ))
}

async fn diff(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((a, b)): Path<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let store = state.store.read().expect("store lock");
    let d = store.diff_commits(&a, &b)?;
    Ok(Json(json!({
        "a": store.resolve(&a)?.id,
        "b": store.resolve(&b)?.id,
        "diff": d,
    })))
}

async fn metrics(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let snap = state.snapshot();
    let c = &snap.counters;
    let rate = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Json(json!({
        "at": snap.at,
        "warm_up": snap.warm_up,
        "buffer": snap.buffer,
        "buffer_capacity": snap.buffer_capacity,
        "prior_mean": snap.prior_mean,
        "window_mean": snap.window_mean,
        "window_ci95": snap.window_ci95,
        "drift": snap.drift,
        "ewma_limit": snap.drift.map(|d| d.ewma_limit()),
        "alarm": snap.drift.is_some_and(|d| d.alarm()),
        "budget": snap.budget,
        "counters": snap.counters,
        "acceptance_rate": rate(c.accepted_decisions, c.decisions),
        "rollback_count": c.rolled_back,
        "series": snap.metrics,
    })))
}

async fn tool_review(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let snap = state.snapshot();
    Ok(Json(json!({"tools": snap.tool_review})))
}

async fn commits(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let store = state.store.read().expect("store lock");
    let log: Vec<_> = store.log().rev().cloned().collect();
    Ok(Json(json!({"commits": log})))
}

async fn tags(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Operator)?;
    let store = state.store.read().expect("store lock");
    let tags: Vec<_> = store.tags().cloned().collect();
    Ok(Json(json!({"tags": tags})))
}

#[derive(Debug, Deserialize)]
pub struct AuditQuery {
    pub from: Option<u64>,
    pub to: Option<u64>,
    pub kind: Option<AuditKind>,
}

async fn audit(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AuditQuery>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers, Role::Admin)?;
    let read = state
        .writer
        .call(move |e| e.audit().read(q.from.unwrap_or(0), q.to.unwrap_or(u64::MAX)))
        .await?;
    let events: Vec<_> = read
        .events
        .into_iter()
        .filter(|ev| q.kind.is_none_or(|k| ev.kind == k))
        .collect();
    Ok(Json(json!({"events": events, "corrupt": read.corrupt})))
}

// ---- governance -------------------------------------------------------------

async fn veto(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let role = authorize(&state, &headers, Role::Admin)?;
    let at = state.clock.now();
    let out = state
        .writer
        .call(move |e| {
            let at = at.max(e.last_event_at());
            e.veto(&id, role.name(), at)
        })
        .await?;
    Ok(Json(serde_json::to_value(out).expect("outcome serializes")))
}

async fn revert(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(tag): Path<String>,
) -> Result<Json<Value>, ApiError> {
    let role = authorize(&state, &headers, Role::Admin)?;
    let at = state.clock.now();
    let out = state
        .writer
        .call(move |e| {
            let at = at.max(e.last_event_at());
            e.revert(&tag, role.name(), at)
        })
        .await?;
    Ok(Json(serde_json::to_value(out).expect("outcome serializes")))
}
