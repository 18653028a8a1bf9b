//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line each. Exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;

use common::checks::{self, contains_denylisted, Check, DOCUMENTED_DENYLIST};
use common::gen::{arb_state_and_delta, window};
use common::{lifecycle, oracle};
use ilws_forge::sim::{run_scenario, Scenario};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Draws `n` values from `strategy` with a fixed seed and checks each one,
/// returning the number of failures and the first message.
fn sample<S: Strategy>(n: usize, strategy: S, mut check: impl FnMut(S::Value) -> Check) -> (usize, Option<String>) {
    let mut runner = TestRunner::deterministic();
    let mut failed = 0;
    let mut first = None;
    for _ in 0..n {
        let value = strategy.new_tree(&mut runner).expect("strategy generates").current();
        if let Err(e) = check(value) {
            failed += 1;
            first.get_or_insert(e);
        }
    }
    (failed, first)
}

fn sampled(what: &str, n: usize, (failed, first): (usize, Option<String>)) -> Verdict {
    match first {
        None => verdict(true, format!("{n} {what}, 0 exceptions")),
        Some(e) => verdict(false, format!("{failed}/{n} {what} failed; first: {e}")),
    }
}

fn load_scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::from_toml(&std::fs::read_to_string(&path).expect("scenario file")).expect("scenario parses")
}

fn gate_calibration() -> Verdict {
    let s = load_scenario("null.toml");
    let g = s.gate();
    let started = Instant::now();
    let r = run_scenario(&s).expect("null run");
    let secs = started.elapsed().as_secs_f64();
    let setup = s.n_candidates >= 10_000 && (g.tau, g.alpha, g.n_win) == (0.05, 0.05, 30);
    let pass = setup && r.acceptance_rate <= 0.07 && secs < 120.0;
    verdict(
        pass,
        format!(
            "{} candidates, {} decisions, acceptance {:.4} (limit 0.07), first attempt {:.4}, per candidate {:.4} (info), {secs:.1}s (limit 120s)",
            r.candidates,
            r.decisions,
            r.acceptance_rate,
            r.first_attempt_acceptance_rate.unwrap_or(f64::NAN),
            r.candidate_acceptance_rate.unwrap_or(f64::NAN),
        ),
    )
}

fn gate_power() -> Verdict {
    let s = load_scenario("uplift.toml");
    let r = run_scenario(&s).expect("uplift run");
    let setup = s.n_candidates >= 2_000 && s.gate().n_win == 30;
    verdict(
        setup && r.acceptance_rate >= 0.90,
        format!(
            "{} candidates, acceptance {:.4} (limit 0.90), per candidate {:.4} (info)",
            r.candidates,
            r.acceptance_rate,
            r.candidate_acceptance_rate.unwrap_or(f64::NAN),
        ),
    )
}

fn oracle_equivalence() -> Verdict {
    let f = oracle::load();
    let parts = [
        ("welch 1e-6", oracle::welch(&f, 1e-6)),
        ("mann-whitney approx 1e-6", oracle::mw_approx(&f, 1e-6)),
        ("mann-whitney exact ==", oracle::mw_exact(&f)),
        ("shapiro-wilk 1e-4", oracle::shapiro(&f, 1e-4)),
    ];
    let pass = parts.iter().all(|(_, o)| o.cases >= 100 && o.failures.is_empty());
    let detail = parts
        .iter()
        .map(|(name, o)| match o.failures.first() {
            None => format!("{name}: {} cases, max err {:.1e}", o.cases, o.max_error),
            Some(e) => format!("{name}: {} of {} failed ({e})", o.failures.len(), o.cases),
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(pass, detail)
}

fn predicate_exactness() -> Verdict {
    let strategy = (window(2..31), window(2..31), 0.0f64..1.0, 0.005f64..0.2);
    let outcome = sample(1_000, strategy, |(prev, new, tau, alpha)| {
        checks::predicate(&prev, &new, tau, alpha)
    });
    sampled("randomized decisions", 1_000, outcome)
}

fn lifecycle_conformance() -> Verdict {
    let failures: Vec<String> = lifecycle::SCENARIOS
        .iter()
        .filter_map(|(name, run)| run().err().map(|e| format!("{name}: {e}")))
        .collect();
    if failures.is_empty() {
        let names: Vec<&str> = lifecycle::SCENARIOS.iter().map(|(n, _)| *n).collect();
        verdict(true, names.join(", "))
    } else {
        verdict(false, failures.join("; "))
    }
}

fn round_trip() -> Verdict {
    let outcome = sample(1_000, arb_state_and_delta(), |(state, delta)| {
        checks::round_trip(&state, &delta)
    });
    sampled("(state, delta) pairs with revert_to", 1_000, outcome)
}

fn replay_determinism() -> Verdict {
    let strategy = proptest::collection::vec(checks::step(), 0..120);
    let outcome = sample(100, strategy, |steps| checks::replay_matches(&steps));
    sampled("recorded histories replayed hash-equal", 100, outcome)
}

const PREFIXES: [&str; 4] = ["", "x = ", "run(\"", "# "];
const SUFFIXES: [&str; 4] = ["", " -rf /tmp", "\")", "\n"];

fn scanner_soundness() -> Verdict {
    let mut problems = vec![];
    if let Err(e) = checks::denylist_is_documented_default() {
        problems.push(e);
    }
    let (mut positive, mut pos_failed) = (0, 0);
    for pattern in DOCUMENTED_DENYLIST {
        for (k, (prefix, suffix)) in PREFIXES.iter().zip(SUFFIXES).enumerate() {
            for location in [None, Some(k)] {
                for params in 1..=3 {
                    positive += 1;
                    if let Err(e) = checks::scanner_positive(pattern, prefix, suffix, location, params) {
                        pos_failed += 1;
                        problems.push(e);
                    }
                }
            }
        }
    }
    let clean = (
        "[a-z0-9 +*=(),\n]{0,80}",
        proptest::collection::vec("[a-z0-9_/.]{1,16}", 0..4),
    )
        .prop_filter("no denylisted literal", |(c, ps)| {
            !contains_denylisted(c) && !ps.iter().any(|p| contains_denylisted(p))
        });
    let (clean_failed, clean_first) = sample(500, clean, |(code, params)| checks::scanner_clean(&code, &params));
    problems.extend(clean_first);

    let root = tempfile::tempdir().expect("temp dir");
    let fixed = ["/etc/passwd", "..", "../x", "a/../../b", "a\\..\\b", "C:\\Windows", "c:/x", "\\\\server\\share"];
    let mut fixed_failed = 0;
    for name in fixed {
        if let Err(e) = checks::path_rejected(name, root.path()) {
            fixed_failed += 1;
            problems.push(e);
        }
    }
    let (paths_failed, paths_first) = sample(1_000, checks::bad_path(), |name| checks::path_rejected(&name, root.path()));
    problems.extend(paths_first);

    verdict(
        problems.is_empty(),
        format!(
            "{positive} positive cases ({pos_failed} passed wrongly), 500 clean ({clean_failed} flagged), {} traversal/absolute paths ({} accepted){}",
            1_000 + fixed.len(),
            paths_failed + fixed_failed,
            problems.first().map(|e| format!("; first: {e}")).unwrap_or_default(),
        ),
    )
}

fn dataset_correctness() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let every = [Some(1), Some(2), Some(3), Some(4), Some(5), None];
    let mut first = checks::dataset(&every, dir.path()).err();
    let ratings = proptest::collection::vec(proptest::option::of(1u8..=5), 1..40);
    let (failed, sampled_first) = sample(200, ratings, |r| {
        let d = tempfile::tempdir().map_err(|e| e.to_string())?;
        checks::dataset(&r, d.path())
    });
    let failed = failed + usize::from(first.is_some());
    first = first.or(sampled_first);
    sampled("exports (w = (r-1)/4, manifest sum, round trip)", 201, (failed, first))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gate calibration under the null", gate_calibration),
        ("gate power at +1.0 uplift", gate_power),
        ("statistical oracle equivalence", oracle_equivalence),
        ("gate predicate exactness", predicate_exactness),
        ("lifecycle conformance", lifecycle_conformance),
        ("rollback round trip", round_trip),
        ("event-sourced determinism", replay_determinism),
        ("policy scanner soundness", scanner_soundness),
        ("dataset correctness", dataset_correctness),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
