//! Drives an in-memory engine the way the service does.

use chrono::{DateTime, Duration, TimeZone, Utc};

use ilws_forge::engine::{Engine, EngineConfig, EngineParts, EventLog, RatingOutcome, SessionInput};
use ilws_forge::gate::GateConfig;
use ilws_forge::knowledge::{InstructionEntry, KnowledgeState, Origin, Section};
use ilws_forge::reflection::{Message, MockEngine};
use ilws_forge::store::{AuditLog, CommitStore};
use ilws_forge::tools::FixtureRunner;

pub const N: usize = 5;

pub fn t(secs: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap() + Duration::seconds(secs)
}

pub fn config() -> EngineConfig {
    let gate = GateConfig {
        n_win: N,
        review_window_secs: 3600,
        ..GateConfig::default()
    };
    let mut c = EngineConfig::new(gate, 1_000, 4_000);
    c.tools.sandbox_root = std::env::temp_dir().join("ilws-harness");
    c
}

pub fn genesis() -> KnowledgeState {
    KnowledgeState::new(
        vec![InstructionEntry {
            created_at: t(0),
            id: "greeting".into(),
            origin: Origin::Manual,
            section: Section::Global,
            text: "Be brief.".into(),
        }],
        vec![],
        vec![],
    )
    .unwrap()
}

pub fn engine(config: EngineConfig) -> Engine {
    let parts = EngineParts {
        store: CommitStore::in_memory(),
        audit: AuditLog::in_memory(),
        events: EventLog::in_memory(),
        reflector: Box::new(MockEngine::default()),
        runner: Box::new(FixtureRunner::passing()),
    };
    Engine::new(config, parts, genesis(), t(0)).unwrap()
}

/// Serves one session with the current state and rates it.
pub fn serve(e: &mut Engine, text: &str, rating: i64, at: DateTime<Utc>) -> RatingOutcome {
    let plan = e.prepare_session(None);
    let s = e
        .record_session(
            SessionInput {
                input: text.into(),
                output: "ok".into(),
                transcript: vec![Message::new("user", text)],
                state_commit: plan.state_commit,
                ..SessionInput::default()
            },
            at,
        )
        .unwrap();
    e.rate_and_run(&s.id, rating, "tester", at).unwrap()
}

pub fn warm(e: &mut Engine, rating: i64) {
    for i in 0..N {
        serve(e, "hello", rating, t(i as i64));
    }
}

/// One step of a generated history.
#[derive(Debug, Clone)]
pub enum Step {
    Plain(u8),
    Correction(u8),
    NewTool(u8),
    VetoLatest,
    RevertGenesis,
    Tick(i64),
}

/// Plays `steps` against `e`, one simulated minute apart. Commands the engine
/// refuses (a veto outside the window, say) are part of the history too.
pub fn play(e: &mut Engine, steps: &[Step]) {
    let mut now = e.last_event_at();
    for (k, step) in steps.iter().enumerate() {
        now += Duration::seconds(60);
        match step {
            Step::Plain(r) => {
                serve(e, &format!("question {k}"), i64::from(*r), now);
            }
            Step::Correction(r) => {
                serve(e, &format!("correction: answer item {k} in full"), i64::from(*r), now);
            }
            Step::NewTool(r) => {
                serve(e, &format!("new tool: t{k}(a, b) => a + b"), i64::from(*r), now);
            }
            Step::VetoLatest => {
                let last = e
                    .candidates()
                    .iter()
                    .rev()
                    .find(|c| c.veto_deadline.is_some())
                    .map(|c| c.id.clone());
                if let Some(id) = last {
                    let _ = e.veto(&id, "admin", now);
                }
            }
            Step::RevertGenesis => {
                let genesis = e.store().log().next().unwrap().id.clone();
                let _ = e.revert(&genesis, "admin", now);
            }
            Step::Tick(ahead) => {
                now += Duration::seconds(*ahead);
                e.tick(now).unwrap();
            }
        }
    }
}
