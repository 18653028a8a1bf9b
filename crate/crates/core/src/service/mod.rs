//! HTTP service around the engine.
//!
//! One writer thread owns the [`Engine`]. Handlers send it closures and
//! await the reply; after each command the writer publishes a fresh
//! [`EngineSnapshot`] that read endpoints serve without touching the
//! writer. Background work a command scheduled (reflection, gate
//! evaluation) runs after the reply is sent and before the next command is
//! taken, so request latency never includes a gate evaluation while the
//! command order alone still determines every outcome.

mod api;

use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, Utc};
use thiserror::Error;
use tokio::sync::{oneshot, watch};

use crate::backbone::{build_backbone, Backbone};
use crate::config::{ConfigError, ServiceConfig};
use crate::engine::{
    read_events, replay, Engine, EngineError, EngineParts, EngineSnapshot, EventLog,
};
use crate::knowledge::KnowledgeState;
use crate::store::{AuditLog, CommitStore, GitMirror, StoreError};

pub use api::{router, SessionCreated};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock moved by hand; used by the simulator and tests.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        ManualClock(Arc::new(Mutex::new(at)))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock().expect("clock lock") = at;
    }

    pub fn advance(&self, by: chrono::Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("backbone: {0}")]
    Backbone(String),
}

/// A command for the writer. It returns the reply to deliver once the
/// snapshot reflecting the command is published.
type Reply = Box<dyn FnOnce() + Send>;
type Job = Box<dyn FnOnce(&mut Engine) -> Reply + Send>;

/// Handle to the writer thread.
#[derive(Clone)]
pub struct Writer {
    tx: mpsc::Sender<Job>,
}

impl Writer {
    /// Starts the writer thread; returns the handle, the snapshot channel
    /// and the thread's join handle (it exits when every handle is dropped).
    pub fn spawn(engine: Engine) -> (Writer, watch::Receiver<Arc<EngineSnapshot>>, JoinHandle<Engine>) {
        let (tx, rx) = mpsc::channel::<Job>();
        let (snap_tx, snap_rx) = watch::channel(Arc::new(engine.snapshot()));
        let thread = std::thread::Builder::new()
            .name("ilws-writer".into())
            .spawn(move || {
                let mut engine = engine;
                while let Ok(job) = rx.recv() {
                    let reply = job(&mut engine);
                    snap_tx.send_replace(Arc::new(engine.snapshot()));
                    reply();
                    if engine.has_pending_work() {
                        let at = engine.last_event_at();
                        if let Err(e) = engine.run_pending(at) {
                            tracing::error!(error = %e, "background work failed");
                        }
                        snap_tx.send_replace(Arc::new(engine.snapshot()));
                    }
                }
                engine
            })
            .expect("spawn writer thread");
        (Writer { tx }, snap_rx, thread)
    }

    /// Runs `f` on the engine and returns its result. The snapshot reflecting
    /// `f` is published before the reply arrives.
    pub async fn call<T, F>(&self, f: F) -> T
    where
        T: Send + 'static,
        F: FnOnce(&mut Engine) -> T + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |e| {
            let out = f(e);
            Box::new(move || {
                let _ = tx.send(out);
            })
        });
        self.tx.send(job).expect("writer thread alive");
        rx.await.expect("writer thread replied")
    }
}

pub struct Roles {
    pub operator: String,
    pub admin: String,
}

/// Shared state of the HTTP handlers.
#[derive(Clone)]
pub struct AppState {
    pub writer: Writer,
    pub snapshots: watch::Receiver<Arc<EngineSnapshot>>,
    pub store: Arc<std::sync::RwLock<CommitStore>>,
    pub backbone: Arc<dyn Backbone>,
    pub clock: Arc<dyn Clock>,
    pub roles: Arc<Roles>,
}

impl AppState {
    pub fn snapshot(&self) -> Arc<EngineSnapshot> {
        self.snapshots.borrow().clone()
    }
}

/// A running service: the state handlers share and the writer thread.
pub struct Service {
    pub state: AppState,
    pub writer_thread: JoinHandle<Engine>,
}

impl Service {
    pub fn start(engine: Engine, backbone: Arc<dyn Backbone>, clock: Arc<dyn Clock>, roles: Roles) -> Self {
        let store = engine.store_handle();
        let (writer, snapshots, writer_thread) = Writer::spawn(engine);
        Service {
            state: AppState {
                writer,
                snapshots,
                store,
                backbone,
                clock,
                roles: Arc::new(roles),
            },
            writer_thread,
        }
    }

    /// Serves `/v1` on `listener` until `shutdown` resolves.
    pub async fn serve(
        &self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, router(self.state.clone()))
            .with_graceful_shutdown(shutdown)
            .await
    }

    /// Periodically settles veto windows and checks the distillation
    /// trigger, so that they do not wait for the next request.
    pub fn spawn_ticker(&self, every: Duration) -> tokio::task::JoinHandle<()> {
        let state = self.state.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            loop {
                interval.tick().await;
                let at = state.clock.now();
                let r = state.writer.call(move |e| e.tick(at.max(e.last_event_at()))).await;
                if let Err(e) = r {
                    tracing::error!(error = %e, "tick failed");
                }
            }
        })
    }
}

/// File layout under the storage root.
pub struct StorageLayout {
    pub store: PathBuf,
    pub audit: PathBuf,
    pub events: PathBuf,
}

impl StorageLayout {
    pub fn new(root: &Path) -> Self {
        StorageLayout {
            store: root.join("store"),
            audit: root.join("audit"),
            events: root.join("events.ndjson"),
        }
    }
}

/// Opens the engine for `config`: restores it from the event log when the
/// storage root already has history, otherwise starts a new history.
pub fn open_engine(config: &ServiceConfig, at: DateTime<Utc>) -> Result<Engine, ServiceError> {
    config.validate()?;
    let layout = StorageLayout::new(&config.storage.root);
    std::fs::create_dir_all(&config.storage.root)?;
    let mut store = CommitStore::open(&layout.store)?;
    if let Some(dir) = &config.storage.git_mirror {
        store = store.with_mirror(GitMirror::init(dir)?);
    }
    let audit = AuditLog::open(&layout.audit)?;
    let recorded = if layout.events.exists() {
        read_events(&layout.events)?
    } else {
        Vec::new()
    };
    if recorded.is_empty() {
        if !store.is_empty() {
            return Err(EngineError::Replay(
                "store has commits but the event log is empty".into(),
            )
            .into());
        }
        let genesis = match &config.storage.genesis {
            Some(path) => {
                let bytes = std::fs::read(path)?;
                KnowledgeState::from_json(&bytes)
                    .map_err(|e| ConfigError::Invalid(format!("genesis state {}: {e}", path.display())))?
            }
            None => KnowledgeState::empty(),
        };
        let parts = EngineParts {
            store,
            audit,
            events: EventLog::append_to(&layout.events)?,
            reflector: config.reflector()?,
            runner: config.runner(),
        };
        return Ok(Engine::new(config.engine(), parts, genesis, at)?);
    }
    let mut engine = replay(
        &recorded,
        Some(config.engine()),
        CommitStore::in_memory(),
        AuditLog::discard(),
        EventLog::discard(),
    )?;
    let written = engine.attach(store, audit, EventLog::append_to(&layout.events)?)?;
    if written > 0 {
        tracing::warn!(written, "store lagged the event log; missing commits restored");
    }
    engine.set_collaborators(config.reflector()?, config.runner());
    Ok(engine)
}

/// Starts the service described by `config` with the system clock.
pub fn start_from_config(config: &ServiceConfig) -> Result<Service, ServiceError> {
    let roles = Roles {
        operator: ServiceConfig::secret(&config.service.operator_token_env)?,
        admin: ServiceConfig::secret(&config.service.admin_token_env)?,
    };
    if roles.operator == roles.admin {
        return Err(ConfigError::Invalid("operator and admin tokens must differ".into()).into());
    }
    let backbone = build_backbone(&config.backbone).map_err(|e| ServiceError::Backbone(e.to_string()))?;
    let engine = open_engine(config, Utc::now())?;
    Ok(Service::start(engine, Arc::from(backbone), Arc::new(SystemClock), roles))
}
