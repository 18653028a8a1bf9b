//! One case of each property, as a function returning what went wrong.
//! The proptest suites and the acceptance target share these.

use std::path::Path;

use chrono::Duration;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

use ilws_forge::distill::{compile_dataset, export_dataset, manifest_path, read_dataset};
use ilws_forge::engine::{replay, EventLog};
use ilws_forge::gate::{decide, GateConfig};
use ilws_forge::knowledge::{apply_delta, invert_delta, KnowledgeDelta, KnowledgeState};
use ilws_forge::reflection::SessionRecord;
use ilws_forge::stats::Sample;
use ilws_forge::store::{AuditLog, CommitMeta, CommitReason, CommitStore};
use ilws_forge::tools::{scan_tool, validate_path, Denylist};

use super::gen::t0;
use super::harness::{self, Step};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// apply, invert, apply again: canonical bytes come back exactly, and the
/// store's revert_to hands back byte-identical states.
pub fn round_trip(state: &KnowledgeState, delta: &KnowledgeDelta) -> Check {
    let after = apply_delta(state, delta).map_err(|e| format!("apply: {e}"))?;
    let inverse = invert_delta(state, delta).map_err(|e| format!("invert: {e}"))?;
    let restored = apply_delta(&after, &inverse).map_err(|e| format!("apply inverse: {e}"))?;
    ensure!(
        restored.canonical_bytes() == state.canonical_bytes(),
        "inverse did not restore canonical bytes"
    );
    ensure!(restored.content_hash() == state.content_hash(), "hash differs after inverse");
    let again = apply_delta(&restored, delta).map_err(|e| format!("re-apply: {e}"))?;
    ensure!(again.canonical_bytes() == after.canonical_bytes(), "re-apply differs");

    let doc = after.to_document_json();
    let parsed = KnowledgeState::from_json(doc.as_bytes()).map_err(|e| format!("reparse: {e}"))?;
    ensure!(parsed.canonical_bytes() == after.canonical_bytes(), "document round trip differs");

    let mut store = CommitStore::in_memory();
    let meta = |r, s| CommitMeta::system(r, None, t0() + Duration::seconds(s));
    let base = store
        .commit_state(state, meta(CommitReason::Manual, 0))
        .map_err(|e| e.to_string())?;
    store
        .commit_state(&after, meta(CommitReason::Manual, 1))
        .map_err(|e| e.to_string())?;
    let back = store
        .revert_to(&base.id, meta(CommitReason::Rollback, 2))
        .map_err(|e| e.to_string())?;
    ensure!(
        back.state.canonical_bytes() == state.canonical_bytes(),
        "revert_to changed the state's bytes"
    );
    let head = store.head_state().ok_or("empty store")?;
    ensure!(head.canonical_bytes() == state.canonical_bytes(), "HEAD after revert differs");
    Ok(())
}

/// The decision's verdict is exactly the predicate over its own numbers,
/// and those numbers are the windows' means.
pub fn predicate(prev: &[u8], new: &[u8], tau: f64, alpha: f64) -> Check {
    let config = GateConfig {
        tau,
        alpha,
        n_win: prev.len().max(new.len()),
        ..GateConfig::default()
    };
    let p = Sample::from_ratings(prev).map_err(|e| e.to_string())?;
    let n = Sample::from_ratings(new).map_err(|e| e.to_string())?;
    let d = decide("c", 0, &p, &n, &config, t0()).map_err(|e| e.to_string())?;
    let mean = |w: &[u8]| w.iter().map(|&r| f64::from(r)).sum::<f64>() / w.len() as f64;
    ensure!(d.mean_prev == mean(prev), "mean_prev {} != {}", d.mean_prev, mean(prev));
    ensure!(d.mean_new == mean(new), "mean_new {} != {}", d.mean_new, mean(new));
    ensure!((0.0..=1.0).contains(&d.p_value), "p = {} out of range", d.p_value);
    let expected = d.mean_new >= d.mean_prev + tau && d.p_value <= alpha;
    ensure!(
        d.accepted == expected,
        "accepted={} but mean_prev={} mean_new={} p={} tau={} alpha={}",
        d.accepted,
        d.mean_prev,
        d.mean_new,
        d.p_value,
        tau,
        alpha
    );
    Ok(())
}

/// The default patterns as documented, kept apart from the implementation's
/// list so a change to either shows up here.
pub const DOCUMENTED_DENYLIST: [&str; 5] = ["sudo", "chmod", "curl", "wget", "eval("];

pub fn denylist_is_documented_default() -> Check {
    let d = Denylist::default();
    ensure!(
        d.patterns() == DOCUMENTED_DENYLIST,
        "default denylist is {:?}",
        d.patterns()
    );
    Ok(())
}

/// `pattern` embedded in code or in one file-like parameter is caught there.
pub fn scanner_positive(pattern: &str, prefix: &str, suffix: &str, in_param: Option<usize>, params: usize) -> Check {
    let dirty = format!("{prefix}{pattern}{suffix}");
    let mut ps: Vec<String> = (0..params).map(|i| format!("data/file{i}.txt")).collect();
    let code = match in_param {
        Some(i) => {
            ps[i % params.max(1)] = dirty.clone();
            "return x + 1".to_string()
        }
        None => dirty.clone(),
    };
    let refs: Vec<&str> = ps.iter().map(String::as_str).collect();
    let report = scan_tool(&code, &refs, &Denylist::default());
    ensure!(!report.passed, "{pattern:?} in {:?} passed", dirty);
    ensure!(
        report.violations.iter().any(|v| v.pattern == pattern),
        "{pattern:?} not among violations"
    );
    Ok(())
}

/// Code and parameters with no denylisted literal pass.
pub fn scanner_clean(code: &str, params: &[String]) -> Check {
    let refs: Vec<&str> = params.iter().map(String::as_str).collect();
    let report = scan_tool(code, &refs, &Denylist::default());
    ensure!(report.passed, "clean input flagged: {:?}", report.violations);
    Ok(())
}

pub fn contains_denylisted(s: &str) -> bool {
    DOCUMENTED_DENYLIST.iter().any(|p| s.contains(p))
}

pub fn path_rejected(name: &str, root: &Path) -> Check {
    ensure!(validate_path(name, root).is_err(), "{name:?} accepted");
    Ok(())
}

/// Names that must be refused: absolute in any spelling, or with a `..`
/// segment anywhere.
pub fn bad_path() -> impl Strategy<Value = String> {
    let seg = "[A-Za-z0-9_.-]{1,8}".prop_filter("not a traversal", |s| s != "..");
    let sep = prop_oneof![Just("/"), Just("\\")];
    let traversal = (
        prop::collection::vec(seg.clone(), 0..4),
        prop::collection::vec(seg.clone(), 0..4),
        sep.clone(),
    )
        .prop_map(|(a, b, sep)| {
            let mut parts = a;
            parts.push("..".into());
            parts.extend(b);
            parts.join(sep)
        });
    let absolute = (
        prop_oneof![Just("/".to_string()), Just("\\".to_string()), "[A-Za-z]:[/\\\\]?"],
        prop::collection::vec(seg, 0..4),
        sep,
    )
        .prop_map(|(root, parts, sep)| format!("{root}{}", parts.join(sep)));
    prop_oneof![traversal, absolute]
}

fn session(i: usize, rating: Option<u8>, commit: &str) -> SessionRecord {
    SessionRecord {
        id: format!("s{i:04}"),
        input: format!("question {i} \u{4e2d} \"quoted\""),
        output: format!("answer {i}\nline two"),
        transcript: vec![],
        tool_log: vec![],
        rating,
        comment: None,
        state_commit: commit.to_string(),
        ephemeral_digest: None,
        served_at: t0() + Duration::seconds(i as i64),
        rated_at: None,
    }
}

/// Expected weight of each rating, written out rather than computed.
pub const WEIGHTS: [(u8, f64); 5] = [(1, 0.0), (2, 0.25), (3, 0.5), (4, 0.75), (5, 1.0)];

/// Rows carry w = (r - 1) / 4 exactly, the manifest's sum and digest match
/// the file, and reading the file back gives the same rows.
pub fn dataset(ratings: &[Option<u8>], dir: &Path) -> Check {
    let sessions: Vec<SessionRecord> = ratings
        .iter()
        .enumerate()
        .map(|(i, r)| session(i, *r, "c0"))
        .collect();
    let rows = compile_dataset(&sessions, None, |c| c == "c0").map_err(|e| e.to_string())?;
    let rated = ratings.iter().flatten().count();
    ensure!(rows.len() == rated, "{} rows for {rated} rated sessions", rows.len());
    for row in &rows {
        let want = WEIGHTS.iter().find(|(r, _)| *r == row.rating).map(|(_, w)| *w);
        ensure!(Some(row.weight) == want, "rating {} has weight {}", row.rating, row.weight);
    }
    if rows.is_empty() {
        return Ok(());
    }
    let path = dir.join("dataset.ndjson");
    let manifest = export_dataset(&rows, &path, serde_json::json!({"case": "acceptance"}), t0())
        .map_err(|e| e.to_string())?;
    let expected_sum: f64 = ratings.iter().flatten().map(|&r| f64::from(r - 1) * 0.25).sum();
    ensure!(
        manifest.weight_sum == expected_sum,
        "manifest weight sum {} != {expected_sum}",
        manifest.weight_sum
    );
    ensure!(manifest.rows == rows.len(), "manifest rows {}", manifest.rows);
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure!(
        manifest.dataset_sha256 == hex::encode(Sha256::digest(&bytes)),
        "manifest digest does not match the file"
    );
    let on_disk: serde_json::Value =
        serde_json::from_slice(&std::fs::read(manifest_path(&path)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure!(
        on_disk["weight_sum"].as_f64() == Some(expected_sum),
        "manifest file weight sum {}",
        on_disk["weight_sum"]
    );
    let back = read_dataset(&path).map_err(|e| e.to_string())?;
    ensure!(back == rows, "rows changed across export and import");
    Ok(())
}

pub fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => (1u8..=5).prop_map(Step::Plain),
        2 => (1u8..=5).prop_map(Step::Correction),
        1 => (1u8..=5).prop_map(Step::NewTool),
        1 => Just(Step::VetoLatest),
        1 => Just(Step::RevertGenesis),
        1 => (0i64..8000).prop_map(Step::Tick),
    ]
}

/// Replaying the recorded log gives the same commits, decisions and budget
/// values, and logs the same events again.
pub fn replay_matches(steps: &[Step]) -> Check {
    let mut e = harness::engine(harness::config());
    harness::play(&mut e, steps);
    let events = e.events().events().map_err(|e| e.to_string())?;
    let r = replay(
        &events,
        Some(harness::config()),
        CommitStore::in_memory(),
        AuditLog::discard(),
        EventLog::in_memory(),
    )
    .map_err(|e| format!("replay failed: {e}"))?;
    ensure!(r.trace().commits == e.trace().commits, "commit sequences differ");
    ensure!(r.trace().decisions == e.trace().decisions, "decision sequences differ");
    ensure!(r.trace().budget_values == e.trace().budget_values, "budget values differ");
    ensure!(r.trace().fingerprint() == e.trace().fingerprint(), "fingerprints differ");
    ensure!(r.decisions() == e.decisions(), "decision records differ");
    ensure!(
        r.events().events().map_err(|e| e.to_string())? == events,
        "replay logged a different history"
    );
    Ok(())
}
