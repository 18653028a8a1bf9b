use std::path::Path;

use ilws_forge::sim::{run_scenario, Mode, Report, Scenario};

fn scenario(model: &str, n_candidates: usize, n_win: usize, seed: u64) -> Scenario {
    Scenario::from_toml(&format!(
        "name = \"t\"\nn_candidates = {n_candidates}\nseed = {seed}\nmodel = {model}\n\n[gate]\nn_win = {n_win}\n"
    ))
    .unwrap()
}

fn uplift(delta: f64, n_candidates: usize, n_win: usize) -> Report {
    run_scenario(&scenario(&format!("{{ kind = \"uplift\", delta = {delta} }}"), n_candidates, n_win, 11)).unwrap()
}

#[test]
fn bundled_scenarios_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut names = vec![];
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let s = Scenario::from_toml(&std::fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        names.push(s.name);
    }
    names.sort();
    assert_eq!(names, ["gamed", "null-calibration", "slow-drift", "uplift-1.0"]);
}

#[test]
fn power_grows_with_effect_size() {
    let rates: Vec<f64> = [0.1, 0.3, 0.6]
        .iter()
        .map(|&d| uplift(d, 150, 20).first_attempt_acceptance_rate.unwrap())
        .collect();
    assert!(rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
}

#[test]
fn power_grows_with_window() {
    let rates: Vec<f64> = [8, 20, 50]
        .iter()
        .map(|&n| uplift(0.3, 150, n).first_attempt_acceptance_rate.unwrap())
        .collect();
    assert!(rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
}

#[test]
fn null_rate_is_consistent_with_alpha() {
    let r = run_scenario(&scenario("{ kind = \"null\" }", 1000, 30, 5)).unwrap();
    let (lo, _) = r.acceptance_rate_ci95.unwrap();
    assert!(lo <= r.gate.alpha, "rate {} with interval from {lo}", r.acceptance_rate);
    assert_eq!(r.false_accept_rate, Some(r.acceptance_rate));
}

#[test]
fn overwhelming_uplift_is_always_accepted() {
    let r = uplift(2.0, 100, 30);
    assert_eq!(r.first_attempt_acceptance_rate, Some(1.0));
    assert_eq!(r.candidate_acceptance_rate, Some(1.0));
    assert_eq!(r.repairs, 0);
}

#[test]
fn same_seed_writes_identical_reports() {
    let s = scenario("{ kind = \"gamed\", sigma = 2.0 }", 60, 10, 9);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files = run_scenario(&s).unwrap().emit(a.path()).unwrap();
    run_scenario(&s).unwrap().emit(b.path()).unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(&f).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn http_mode_reports_like_in_process() {
    let mut s = scenario("{ kind = \"uplift\", delta = 0.5 }", 12, 8, 3);
    let local = run_scenario(&s).unwrap();
    s.mode = Mode::Http;
    let remote = run_scenario(&s).unwrap();
    assert_eq!(remote.trace_fingerprint, local.trace_fingerprint);
    assert_eq!(remote.summary().replace("Http", "InProcess"), local.summary());
}
