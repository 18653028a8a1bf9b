//! C ABI over `ilws-forge`.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`IlwsStatus`]; on failure
//!   [`ilws_last_error`] describes the error for the calling thread.
//! * Structured values cross the boundary as UTF-8 JSON. Strings returned
//!   through `out_json` are owned by the caller and released with
//!   [`ilws_string_free`].
//! * Times are Unix milliseconds (UTC).
//! * An [`IlwsEngine`] handle is not thread-safe; serialize calls on it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::Serialize;

use ilws_forge::config::ServiceConfig;
use ilws_forge::engine::{Engine, EngineConfig, EngineError, EngineParts, EventLog, SessionInput};
use ilws_forge::gate::{decide, GateConfig};
use ilws_forge::knowledge::KnowledgeState;
use ilws_forge::reflection::MockEngine;
use ilws_forge::service::{open_engine, ServiceError};
use ilws_forge::sim::{run_scenario, Scenario, SimError};
use ilws_forge::stats::{Sample, TestKind};
use ilws_forge::store::{AuditLog, CommitStore, StoreError};
use ilws_forge::tools::FixtureRunner;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlwsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Conflict = 5,
    Storage = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlwsTest {
    Welch = 0,
    MannWhitney = 1,
}

/// Outcome of one gate evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlwsGateResult {
    pub accepted: bool,
    pub test: IlwsTest,
    pub mean_prev: f64,
    pub mean_new: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Opaque engine handle.
pub struct IlwsEngine {
    engine: Engine,
}

struct Failure {
    status: IlwsStatus,
    message: String,
}

impl Failure {
    fn new(status: IlwsStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        use EngineError as E;
        let status = match &e {
            E::UnknownSession(_) | E::UnknownCandidate(_) | E::Store(StoreError::UnknownRef(_)) => {
                IlwsStatus::NotFound
            }
            E::AlreadyRated(_)
            | E::VetoWindowClosed { .. }
            | E::NotAccepted { .. }
            | E::CandidateInFlight(_)
            | E::WarmupIncomplete { .. } => IlwsStatus::Conflict,
            E::InvalidRating(_) | E::EmptyInput | E::Delta(_) | E::Config(_) => IlwsStatus::InvalidArgument,
            E::Store(_) | E::EventLog(_) => IlwsStatus::Storage,
            _ => IlwsStatus::Internal,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Engine(e) => e.into(),
            ServiceError::Config(e) => Failure::new(IlwsStatus::InvalidArgument, e.to_string()),
            other => Failure::new(IlwsStatus::Storage, other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Engine(e) => e.into(),
            SimError::Config(m) => Failure::new(IlwsStatus::InvalidArgument, m),
            other => Failure::new(IlwsStatus::Internal, other.to_string()),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IlwsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IlwsStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            IlwsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(IlwsStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(IlwsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn engine_arg<'a>(h: *mut IlwsEngine) -> Result<&'a mut Engine, Failure> {
    h.as_mut()
        .map(|h| &mut h.engine)
        .ok_or_else(|| Failure::new(IlwsStatus::NullArgument, "engine handle is null"))
}

fn time_arg(ms: i64) -> Result<DateTime<Utc>, Failure> {
    DateTime::from_timestamp_millis(ms)
        .ok_or_else(|| Failure::new(IlwsStatus::InvalidArgument, format!("time {ms} ms out of range")))
}

fn json_arg<T: serde::de::DeserializeOwned>(text: &str, name: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::new(IlwsStatus::InvalidArgument, format!("{name}: {e}")))
}

unsafe fn write_json<T: Serialize>(out: *mut *mut c_char, value: &T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(IlwsStatus::NullArgument, "out_json is null"));
    }
    let text = serde_json::to_string(value).map_err(|e| Failure::new(IlwsStatus::Internal, e.to_string()))?;
    let c = CString::new(text).map_err(|e| Failure::new(IlwsStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version; a static string, not to be freed.
#[no_mangle]
pub extern "C" fn ilws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn ilws_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ilws_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an in-memory engine with the mock reflection engine and a tool
/// runner that passes every test. `genesis_json` may be null for an empty
/// state.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_new(
    config_json: *const c_char,
    genesis_json: *const c_char,
    at_ms: i64,
    out: *mut *mut IlwsEngine,
) -> IlwsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(IlwsStatus::NullArgument, "out is null"));
        }
        let config: EngineConfig = json_arg(str_arg(config_json, "config_json")?, "config_json")?;
        let genesis = match opt_str_arg(genesis_json, "genesis_json")? {
            Some(text) => KnowledgeState::from_json(text.as_bytes())
                .map_err(|e| Failure::new(IlwsStatus::InvalidArgument, format!("genesis_json: {e}")))?,
            None => KnowledgeState::empty(),
        };
        let parts = EngineParts {
            store: CommitStore::in_memory(),
            audit: AuditLog::discard(),
            events: EventLog::discard(),
            reflector: Box::new(MockEngine::default()),
            runner: Box::new(FixtureRunner::passing()),
        };
        let engine = Engine::new(config, parts, genesis, time_arg(at_ms)?)?;
        *out = Box::into_raw(Box::new(IlwsEngine { engine }));
        Ok(())
    })
}

/// Opens the durable engine described by a service TOML file, restoring it
/// from its event log when one exists.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_open(
    config_path: *const c_char,
    at_ms: i64,
    out: *mut *mut IlwsEngine,
) -> IlwsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(IlwsStatus::NullArgument, "out is null"));
        }
        let path = str_arg(config_path, "config_path")?;
        let config = ServiceConfig::load(Path::new(path))
            .map_err(|e| Failure::new(IlwsStatus::InvalidArgument, e.to_string()))?;
        let engine = open_engine(&config, time_arg(at_ms)?)?;
        *out = Box::into_raw(Box::new(IlwsEngine { engine }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_free(h: *mut IlwsEngine) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Plans a session: the prompt to serve it with and the commit it runs
/// under. `ephemeral` may be null.
///
/// # Safety
/// `h` must be a live handle; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_prepare_session(
    h: *mut IlwsEngine,
    ephemeral: *const c_char,
    out_json: *mut *mut c_char,
) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let plan = e.prepare_session(opt_str_arg(ephemeral, "ephemeral")?);
        write_json(out_json, &plan)
    })
}

/// Records a served session (a `SessionInput` JSON object) and returns the
/// stored session record.
///
/// # Safety
/// As for [`ilws_engine_prepare_session`].
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_record_session(
    h: *mut IlwsEngine,
    session_json: *const c_char,
    at_ms: i64,
    out_json: *mut *mut c_char,
) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let input: SessionInput = json_arg(str_arg(session_json, "session_json")?, "session_json")?;
        let record = e.record_session(input, time_arg(at_ms)?)?;
        write_json(out_json, &record)
    })
}

/// Rates a session and runs the work it scheduled (reflection, gate
/// evaluation) before returning.
///
/// # Safety
/// As for [`ilws_engine_prepare_session`].
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_rate(
    h: *mut IlwsEngine,
    session_id: *const c_char,
    rating: i64,
    submitter: *const c_char,
    at_ms: i64,
    out_json: *mut *mut c_char,
) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let id = str_arg(session_id, "session_id")?;
        let who = opt_str_arg(submitter, "submitter")?.unwrap_or("operator");
        let at = time_arg(at_ms)?;
        let out = e.rate(id, rating, None, who, at)?;
        e.run_pending(at)?;
        write_json(out_json, &out)
    })
}

/// # Safety
/// As for [`ilws_engine_prepare_session`].
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_veto(
    h: *mut IlwsEngine,
    candidate_id: *const c_char,
    actor: *const c_char,
    at_ms: i64,
    out_json: *mut *mut c_char,
) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let out = e.veto(
            str_arg(candidate_id, "candidate_id")?,
            str_arg(actor, "actor")?,
            time_arg(at_ms)?,
        )?;
        write_json(out_json, &out)
    })
}

/// Reverts the serving state to a commit id or tag.
///
/// # Safety
/// As for [`ilws_engine_prepare_session`].
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_revert(
    h: *mut IlwsEngine,
    reference: *const c_char,
    actor: *const c_char,
    at_ms: i64,
    out_json: *mut *mut c_char,
) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let out = e.revert(
            str_arg(reference, "reference")?,
            str_arg(actor, "actor")?,
            time_arg(at_ms)?,
        )?;
        write_json(out_json, &out)
    })
}

/// Settles expired veto windows and checks the distillation trigger.
/// `out_changed` (may be null) receives whether anything changed.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_tick(h: *mut IlwsEngine, at_ms: i64, out_changed: *mut bool) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        let changed = e.tick(time_arg(at_ms)?)?;
        if let Some(o) = out_changed.as_mut() {
            *o = changed;
        }
        Ok(())
    })
}

/// Read-only view of the engine: serving state, candidates, decisions,
/// budget, metrics and trace fingerprint.
///
/// # Safety
/// As for [`ilws_engine_prepare_session`].
#[no_mangle]
pub unsafe extern "C" fn ilws_engine_snapshot(h: *mut IlwsEngine, out_json: *mut *mut c_char) -> IlwsStatus {
    guard(|| {
        let e = engine_arg(h)?;
        write_json(out_json, &e.snapshot())
    })
}

/// Evaluates the acceptance gate on two rating windows (values 1..=5).
///
/// # Safety
/// `prev` and `new` must point to `n_prev` and `n_new` bytes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ilws_gate_evaluate(
    prev: *const u8,
    n_prev: usize,
    new: *const u8,
    n_new: usize,
    tau: f64,
    alpha: f64,
    out: *mut IlwsGateResult,
) -> IlwsStatus {
    guard(|| {
        if prev.is_null() || new.is_null() || out.is_null() {
            return Err(Failure::new(IlwsStatus::NullArgument, "null window or output"));
        }
        let config = GateConfig {
            tau,
            alpha,
            ..GateConfig::default()
        };
        config.validate().map_err(|m| Failure::new(IlwsStatus::InvalidArgument, m))?;
        let bad = |e: ilws_forge::stats::StatError| Failure::new(IlwsStatus::InvalidArgument, e.to_string());
        let p = Sample::from_ratings(std::slice::from_raw_parts(prev, n_prev)).map_err(bad)?;
        let n = Sample::from_ratings(std::slice::from_raw_parts(new, n_new)).map_err(bad)?;
        let d = decide("ffi", 0, &p, &n, &config, Utc::now()).map_err(bad)?;
        *out = IlwsGateResult {
            accepted: d.accepted,
            test: match d.test_used {
                TestKind::Welch => IlwsTest::Welch,
                TestKind::MannWhitney => IlwsTest::MannWhitney,
            },
            mean_prev: d.mean_prev,
            mean_new: d.mean_new,
            statistic: d.statistic,
            p_value: d.p_value,
        };
        Ok(())
    })
}

/// Runs a simulation scenario given as TOML and returns its report.
///
/// # Safety
/// `scenario_toml` must be NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ilws_sim_run(scenario_toml: *const c_char, out_json: *mut *mut c_char) -> IlwsStatus {
    guard(|| {
        let scenario = Scenario::from_toml(str_arg(scenario_toml, "scenario_toml")?)?;
        let report = run_scenario(&scenario)?;
        write_json(out_json, &report)
    })
}
