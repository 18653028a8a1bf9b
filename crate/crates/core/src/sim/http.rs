//! Drives the loop through a live `/v1` server on a loopback port.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::{Driver, Outcome, Scenario, Served, SimError, SIM_BACKBONE_SEED};
use crate::backbone::MockBackbone;
use crate::engine::{BudgetView, Counters, Engine, EngineParts, EventLog, RatingOutcome};
use crate::gate::{Candidate, GateDecision};
use crate::reflection::MockEngine;
use crate::service::{ManualClock, Roles, Service, SessionCreated};
use crate::store::{AuditLog, CommitStore};
use crate::tools::FixtureRunner;

/// The server only listens on loopback for the lifetime of the run, so
/// fixed tokens are enough.
const OPERATOR_TOKEN: &str = "sim-operator";
const ADMIN_TOKEN: &str = "sim-admin";

pub(crate) struct HttpDriver {
    base: String,
    client: reqwest::blocking::Client,
    clock: ManualClock,
    shutdown: Option<oneshot::Sender<()>>,
    runtime: tokio::runtime::Runtime,
    server: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

fn http_err(e: impl std::fmt::Display) -> SimError {
    SimError::Http(e.to_string())
}

impl HttpDriver {
    pub(crate) fn start(scenario: &Scenario) -> Result<Self, SimError> {
        let parts = EngineParts {
            store: CommitStore::in_memory(),
            audit: AuditLog::discard(),
            events: EventLog::discard(),
            reflector: Box::new(MockEngine::default()),
            runner: Box::new(FixtureRunner::passing()),
        };
        let engine = Engine::new(scenario.engine_config(), parts, scenario.genesis(), scenario.start())?;
        let clock = ManualClock::new(scenario.start());
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(http_err)?;
        let service = Service::start(
            engine,
            Arc::new(MockBackbone {
                seed: SIM_BACKBONE_SEED,
            }),
            Arc::new(clock.clone()),
            Roles {
                operator: OPERATOR_TOKEN.into(),
                admin: ADMIN_TOKEN.into(),
            },
        );
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .map_err(http_err)?;
        let addr = listener.local_addr().map_err(http_err)?;
        let (tx, rx) = oneshot::channel::<()>();
        let server = runtime.spawn(async move {
            service
                .serve(listener, async {
                    let _ = rx.await;
                })
                .await
        });
        let client = reqwest::blocking::Client::builder()
            .no_proxy()
            .build()
            .map_err(http_err)?;
        Ok(HttpDriver {
            base: format!("http://{addr}"),
            client,
            clock,
            shutdown: Some(tx),
            runtime,
            server: Some(server),
        })
    }

    fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, SimError> {
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(SimError::Http(format!("{status}: {body}")));
        }
        resp.json().map_err(http_err)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, SimError> {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .bearer_auth(OPERATOR_TOKEN)
            .send()
            .map_err(http_err)?;
        Self::decode(resp)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, SimError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .bearer_auth(OPERATOR_TOKEN)
            .json(body)
            .send()
            .map_err(http_err)?;
        Self::decode(resp)
    }

    fn field<T: DeserializeOwned>(v: &Value, key: &str) -> Result<T, SimError> {
        let f = v
            .get(key)
            .cloned()
            .ok_or_else(|| SimError::Http(format!("response lacks {key}")))?;
        serde_json::from_value(f).map_err(http_err)
    }
}

impl Driver for HttpDriver {
    fn session(&mut self, text: &str, at: DateTime<Utc>) -> Result<Served, SimError> {
        self.clock.set(at);
        let created: SessionCreated = self.post("/v1/sessions", &json!({"input": text}))?;
        Ok(Served {
            session_id: created.session_id,
            candidate_id: created.candidate_id,
        })
    }

    fn rate(&mut self, session_id: &str, rating: u8, at: DateTime<Utc>) -> Result<RatingOutcome, SimError> {
        self.clock.set(at);
        self.post(
            &format!("/v1/sessions/{session_id}/rating"),
            &json!({"rating": rating}),
        )
    }

    fn budget(&mut self) -> Result<(BudgetView, u64), SimError> {
        let m: Value = self.get("/v1/metrics")?;
        let budget: BudgetView = Self::field(&m, "budget")?;
        let counters: Counters = Self::field(&m, "counters")?;
        Ok((budget, counters.distillations))
    }

    fn finish(mut self: Box<Self>) -> Result<Outcome, SimError> {
        let list: Value = self.get("/v1/candidates")?;
        let views: Vec<Value> = Self::field(&list, "candidates")?;
        let candidates = views
            .into_iter()
            .map(|v| serde_json::from_value::<Candidate>(v).map_err(http_err))
            .collect::<Result<Vec<_>, _>>()?;
        let d: Value = self.get("/v1/gate/decisions")?;
        let decisions: Vec<GateDecision> = Self::field(&d, "decisions")?;
        let m: Value = self.get("/v1/metrics")?;
        let counters: Counters = Self::field(&m, "counters")?;
        let budget: BudgetView = Self::field(&m, "budget")?;
        let state: Value = self.get("/v1/state")?;
        let fingerprint: String = Self::field(&state, "trace_fingerprint")?;
        self.shutdown_server()?;
        Ok(Outcome {
            candidates,
            decisions,
            counters,
            budget,
            fingerprint,
        })
    }
}

impl HttpDriver {
    fn shutdown_server(&mut self) -> Result<(), SimError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(server) = self.server.take() {
            self.runtime
                .block_on(server)
                .map_err(http_err)?
                .map_err(http_err)?;
        }
        Ok(())
    }
}

impl Drop for HttpDriver {
    fn drop(&mut self) {
        let _ = self.shutdown_server();
    }
}
