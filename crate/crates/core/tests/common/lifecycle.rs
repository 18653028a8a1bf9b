//! Scripted lifecycle scenarios against the public engine API.

use chrono::Duration;

use ilws_forge::engine::EngineError;
use ilws_forge::gate::Lifecycle;
use ilws_forge::knowledge::{DeltaOp, EntryPayload, InstructionEntry, KnowledgeDelta, Origin, Proposer, Section};
use ilws_forge::store::AuditKind;

use super::checks::Check;
use super::harness::{config, engine, serve, t, warm, N};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn manual_delta(id: &str) -> KnowledgeDelta {
    KnowledgeDelta::new(
        vec![DeltaOp::Insert {
            entry: EntryPayload::S(InstructionEntry {
                created_at: t(0),
                id: id.into(),
                origin: Origin::Manual,
                section: Section::Product,
                text: "Quote prices in EUR.".into(),
            }),
            position: None,
        }],
        Proposer::Manual,
    )
}

pub fn warm_up_blocks_candidates() -> Check {
    let mut e = engine(config());
    for i in 0..N - 1 {
        let out = serve(&mut e, "correction: say hello first", 3, t(i as i64));
        ensure!(out.warm_up && !out.reflection_scheduled, "rating {i} scheduled reflection in warm-up");
    }
    ensure!(e.candidates().is_empty(), "candidate opened during warm-up");
    match e.propose(manual_delta("eur"), vec![], t(10)) {
        Err(EngineError::WarmupIncomplete { have, need }) if have == N - 1 && need == N => {}
        other => return Err(format!("propose in warm-up gave {other:?}")),
    }
    serve(&mut e, "hello", 3, t(11));
    let out = serve(&mut e, "correction: say hello first", 3, t(12));
    ensure!(!out.warm_up && out.reflection_scheduled, "full buffer still blocked reflection");
    ensure!(e.in_flight().is_some(), "no candidate after warm-up");
    Ok(())
}

pub fn single_flight() -> Check {
    let mut e = engine(config());
    warm(&mut e, 3);
    serve(&mut e, "correction: first change", 3, t(10));
    let first = e.in_flight().ok_or("no candidate")?.id.clone();
    let out = serve(&mut e, "correction: second change", 3, t(11));
    ensure!(out.reflection_dropped, "second reflection was not dropped");
    ensure!(e.candidates().len() == 1, "{} candidates in flight", e.candidates().len());
    match e.propose(manual_delta("eur"), vec![], t(12)) {
        Err(EngineError::CandidateInFlight(id)) if id == first => {}
        other => return Err(format!("propose while in flight gave {other:?}")),
    }
    Ok(())
}

pub fn one_repair_then_rollback() -> Check {
    let mut e = engine(config());
    warm(&mut e, 4);
    let base = e.serving_state().canonical_bytes();
    serve(&mut e, "correction: be verbose", 4, t(10));
    let id = e.in_flight().ok_or("no candidate")?.id.clone();
    for i in 0..N {
        serve(&mut e, "meh", 1, t(20 + i as i64));
    }
    let c = e.candidate(&id).ok_or("candidate vanished")?;
    ensure!(
        c.lifecycle == Lifecycle::RepairedProvisional && c.repair_count == 1,
        "after first failure: {:?}, {} repairs",
        c.lifecycle,
        c.repair_count
    );
    ensure!(e.in_flight().map(|c| c.id.as_str()) == Some(id.as_str()), "repair left flight");
    for i in 0..N {
        serve(&mut e, "meh", 1, t(40 + i as i64));
    }
    let c = e.candidate(&id).ok_or("candidate vanished")?;
    ensure!(c.lifecycle == Lifecycle::RolledBack, "after second failure: {:?}", c.lifecycle);
    ensure!(c.repair_count == 1, "{} repairs", c.repair_count);
    let attempts: Vec<u8> = c.decisions.iter().map(|d| d.attempt).collect();
    ensure!(attempts == [0, 1], "attempts {attempts:?}");
    ensure!(c.decisions.iter().all(|d| !d.accepted), "a failing attempt was accepted");
    ensure!(
        c.decisions[0].config_snapshot == c.decisions[1].config_snapshot,
        "repair was judged under a different gate"
    );
    ensure!(e.serving_state().canonical_bytes() == base, "base state not restored");
    ensure!(e.in_flight().is_none(), "rolled-back candidate still in flight");
    ensure!(e.budget().value() == 0, "budget {} after rollback", e.budget().value());
    Ok(())
}

pub fn veto_restores_and_debits() -> Check {
    let mut e = engine(config());
    warm(&mut e, 1);
    let base = e.serving_state().canonical_bytes();
    let before = e.budget().value();
    serve(&mut e, "correction: greet by name", 1, t(10));
    let id = e.in_flight().ok_or("no candidate")?.id.clone();
    for i in 0..N {
        serve(&mut e, "thanks", 5, t(20 + i as i64));
    }
    let c = e.candidate(&id).ok_or("candidate vanished")?.clone();
    ensure!(c.lifecycle == Lifecycle::Accepted, "not accepted: {:?}", c.lifecycle);
    ensure!(e.budget().value() == before + c.credited_size, "credit missing");
    ensure!(c.credited_size > 0, "accepted change credited nothing");
    let deadline = c.veto_deadline.ok_or("no deadline")?;
    let out = e
        .veto(&id, "admin", deadline - Duration::seconds(1))
        .map_err(|e| e.to_string())?;
    ensure!(out.candidate_id == id, "vetoed {}", out.candidate_id);
    ensure!(e.serving_state().canonical_bytes() == base, "veto did not restore the base bytes");
    ensure!(e.budget().value() == before, "budget {} after veto", e.budget().value());
    ensure!(
        e.candidate(&id).map(|c| c.lifecycle) == Some(Lifecycle::Vetoed),
        "lifecycle after veto"
    );
    Ok(())
}

pub fn budget_fires_one_distillation() -> Check {
    let mut cfg = config();
    cfg.budget_threshold = 1;
    let mut e = engine(cfg);
    warm(&mut e, 1);
    serve(&mut e, "correction: greet by name", 1, t(10));
    for i in 0..N {
        serve(&mut e, "thanks", 5, t(20 + i as i64));
    }
    ensure!(e.budget().value() >= 1, "no credit");
    ensure!(e.counters().distillations == 0, "distilled while credit was under review");
    let late = t(10) + Duration::days(3);
    e.tick(late).map_err(|e| e.to_string())?;
    ensure!(e.counters().distillations == 1, "{} distillations", e.counters().distillations);
    ensure!(e.budget().value() == 0, "budget {} after distillation", e.budget().value());
    e.tick(late + Duration::seconds(1)).map_err(|e| e.to_string())?;
    ensure!(e.counters().distillations == 1, "second distillation fired");
    let audit = e.audit().read_all().map_err(|e| e.to_string())?.events;
    let n = audit.iter().filter(|ev| ev.kind == AuditKind::Distill).count();
    ensure!(n == 1, "{n} distill audit events");
    Ok(())
}

pub type Scenario = (&'static str, fn() -> Check);

pub const SCENARIOS: [Scenario; 5] = [
    ("warm-up blocks candidates", warm_up_blocks_candidates),
    ("single-flight", single_flight),
    ("one repair then rollback", one_repair_then_rollback),
    ("veto restores base and debits budget", veto_restores_and_debits),
    ("budget fires exactly one distillation", budget_fires_one_distillation),
];
