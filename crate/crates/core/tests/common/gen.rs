//! proptest strategies for knowledge states and deltas that apply to them.

use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;

use ilws_forge::knowledge::{
    apply_delta, Component, DeltaOp, EntryPayload, InstructionEntry, KnowledgeDelta, KnowledgeState, Origin,
    Proposer, Section, ToolEntry, ToolStatus, UserPreference,
};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()
}

/// Non-blank text, including quoting, escapes and non-ASCII.
pub fn text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 .,:;'\"\\\\\n\t\u{e9}\u{4e2d}\u{1f600}-]{0,40}"
}

fn section() -> impl Strategy<Value = Section> {
    prop_oneof![Just(Section::Global), Just(Section::Product), Just(Section::Tenant)]
}

fn origin() -> impl Strategy<Value = Origin> {
    prop_oneof![
        Just(Origin::Reflection),
        Just(Origin::Repair),
        Just(Origin::Manual),
        Just(Origin::ToolRubric)
    ]
}

fn status() -> impl Strategy<Value = ToolStatus> {
    prop_oneof![
        Just(ToolStatus::Active),
        Just(ToolStatus::Quarantined),
        Just(ToolStatus::Deprecated)
    ]
}

fn stamp() -> impl Strategy<Value = DateTime<Utc>> {
    (0i64..10_000_000).prop_map(|s| t0() + Duration::seconds(s))
}

pub fn tool(name: &str, code: String, status: ToolStatus, at: DateTime<Utc>) -> ToolEntry {
    ToolEntry {
        code,
        created_at: at,
        name: name.to_string(),
        sandbox_dir: format!("tools/{name}"),
        signature: format!("{name}(x: int) -> int"),
        status,
    }
}

pub fn arb_state() -> impl Strategy<Value = KnowledgeState> {
    (
        prop::collection::vec((section(), text(), origin(), stamp()), 0..6),
        prop::collection::vec(("[ -~]{0,20}", stamp()), 0..4),
        prop::collection::vec((text(), status(), stamp()), 0..3),
    )
        .prop_map(|(s, u, t)| {
            let s = s
                .into_iter()
                .enumerate()
                .map(|(i, (section, text, origin, created_at))| InstructionEntry {
                    created_at,
                    id: format!("i{i}"),
                    origin,
                    section,
                    text,
                })
                .collect();
            let u = u
                .into_iter()
                .enumerate()
                .map(|(i, (value, created_at))| UserPreference {
                    created_at,
                    key: format!("p{i}"),
                    value,
                })
                .collect();
            let t = t
                .into_iter()
                .enumerate()
                .map(|(i, (code, st, at))| tool(&format!("tool{i}"), code, st, at))
                .collect();
            KnowledgeState::new(s, u, t).expect("generated ids are unique")
        })
}

/// Raw material for one op; resolved against the state it will apply to.
#[derive(Debug, Clone)]
pub struct OpSeed {
    kind: u8,
    component: u8,
    pick: usize,
    text: String,
    positioned: bool,
    snapshot: bool,
}

fn op_seed() -> impl Strategy<Value = OpSeed> {
    (0u8..3, 0u8..3, any::<usize>(), text(), any::<bool>(), any::<bool>()).prop_map(
        |(kind, component, pick, text, positioned, snapshot)| OpSeed {
            kind,
            component,
            pick,
            text,
            positioned,
            snapshot,
        },
    )
}

fn payload_at(state: &KnowledgeState, c: Component, i: usize) -> EntryPayload {
    match c {
        Component::S => EntryPayload::S(state.instructions()[i].clone()),
        Component::U => EntryPayload::U(state.preferences()[i].clone()),
        Component::T => EntryPayload::T(state.tools()[i].clone()),
    }
}

fn len_of(state: &KnowledgeState, c: Component) -> usize {
    match c {
        Component::S => state.instructions().len(),
        Component::U => state.preferences().len(),
        Component::T => state.tools().len(),
    }
}

/// Turns a seed into an op valid against `state`; `fresh` numbers new ids.
fn resolve(state: &KnowledgeState, seed: &OpSeed, fresh: usize) -> DeltaOp {
    let c = [Component::S, Component::U, Component::T][seed.component as usize];
    let n = len_of(state, c);
    let kind = if n == 0 { 0 } else { seed.kind };
    match kind {
        0 => {
            let entry = match c {
                Component::S => EntryPayload::S(InstructionEntry {
                    created_at: t0(),
                    id: format!("new{fresh}"),
                    origin: Origin::Reflection,
                    section: Section::Product,
                    text: seed.text.clone(),
                }),
                Component::U => EntryPayload::U(UserPreference {
                    created_at: t0(),
                    key: format!("new{fresh}"),
                    value: seed.text.clone(),
                }),
                Component::T => EntryPayload::T(tool(
                    &format!("new{fresh}"),
                    seed.text.clone(),
                    ToolStatus::Quarantined,
                    t0(),
                )),
            };
            DeltaOp::Insert {
                entry,
                position: seed.positioned.then(|| seed.pick % (n + 1)),
            }
        }
        1 => {
            let entry = match payload_at(state, c, seed.pick % n) {
                EntryPayload::S(mut e) => {
                    e.text = seed.text.clone();
                    EntryPayload::S(e)
                }
                EntryPayload::U(mut e) => {
                    e.value = seed.text.clone();
                    EntryPayload::U(e)
                }
                EntryPayload::T(mut e) => {
                    e.code = seed.text.clone();
                    EntryPayload::T(e)
                }
            };
            DeltaOp::Modify {
                target_id: entry.key().to_string(),
                entry,
            }
        }
        _ => {
            let victim = payload_at(state, c, seed.pick % n);
            DeltaOp::Delete {
                component: c,
                target_id: victim.key().to_string(),
                snapshot: seed.snapshot.then_some(victim),
            }
        }
    }
}

/// Builds a delta whose ops apply in sequence to `state`.
pub fn build_delta(state: &KnowledgeState, seeds: &[OpSeed]) -> KnowledgeDelta {
    let mut current = state.clone();
    let mut ops = Vec::new();
    for (i, seed) in seeds.iter().enumerate() {
        let op = resolve(&current, seed, i);
        let single = KnowledgeDelta::new(vec![op.clone()], Proposer::Manual);
        current = apply_delta(&current, &single).expect("resolved ops apply");
        ops.push(op);
    }
    KnowledgeDelta::new(ops, Proposer::Manual)
}

pub fn arb_state_and_delta() -> impl Strategy<Value = (KnowledgeState, KnowledgeDelta)> {
    (arb_state(), prop::collection::vec(op_seed(), 0..6)).prop_map(|(s, seeds)| {
        let d = build_delta(&s, &seeds);
        (s, d)
    })
}

/// A Likert window of `len` ratings.
pub fn window(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(1u8..=5, len)
}
