//! Comparison of the statistical routines against frozen reference values
//! (generated by `tests/oracle/gen_stat_fixtures.py`).

use ilws_forge::stats::{
    mann_whitney_exact, mann_whitney_normal, select_test, shapiro_wilk, welch_one_sided, TestKind,
};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Fixture {
    pub welch: Vec<WelchCase>,
    pub mann_whitney_exact: Vec<ExactCase>,
    pub mann_whitney_approx: Vec<ApproxCase>,
    pub shapiro_wilk: Vec<ShapiroCase>,
    pub select_test: Vec<SelectCase>,
}

#[derive(Deserialize)]
pub struct WelchCase {
    pub prev: Vec<f64>,
    pub new: Vec<f64>,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct ExactCase {
    pub prev: Vec<f64>,
    pub new: Vec<f64>,
    pub u: f64,
    pub count: u64,
    pub total: u64,
}

#[derive(Deserialize)]
pub struct ApproxCase {
    pub prev: Vec<f64>,
    pub new: Vec<f64>,
    pub u: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct ShapiroCase {
    pub sample: Vec<f64>,
    pub w: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct SelectCase {
    pub prev: Vec<f64>,
    pub new: Vec<f64>,
    pub p_prev: Option<f64>,
    pub p_new: Option<f64>,
}

pub fn load() -> Fixture {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/stat_oracle.json");
    serde_json::from_str(&std::fs::read_to_string(path).expect("fixture present"))
        .expect("fixture parses")
}

/// Number of cases checked and the failures, as messages.
pub struct Outcome {
    pub cases: usize,
    pub failures: Vec<String>,
    pub max_error: f64,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            cases: 0,
            failures: Vec::new(),
            max_error: 0.0,
        }
    }

    fn check(&mut self, what: &str, i: usize, got: f64, want: f64, tol: f64) {
        let err = (got - want).abs();
        self.max_error = self.max_error.max(err);
        if !(err <= tol) {
            self.failures.push(format!("{what} case {i}: got {got}, want {want}"));
        }
    }
}

pub fn welch(f: &Fixture, tol: f64) -> Outcome {
    let mut o = Outcome::new();
    for (i, c) in f.welch.iter().enumerate() {
        o.cases += 1;
        let r = welch_one_sided(&c.prev, &c.new).expect("welch runs");
        o.check("welch t", i, r.statistic, c.t, tol * c.t.abs().max(1.0));
        o.check("welch df", i, r.degrees_of_freedom.unwrap(), c.df, tol * c.df.max(1.0));
        o.check("welch p", i, r.p_value, c.p, tol);
    }
    o
}

pub fn mw_exact(f: &Fixture) -> Outcome {
    let mut o = Outcome::new();
    for (i, c) in f.mann_whitney_exact.iter().enumerate() {
        o.cases += 1;
        let e = mann_whitney_exact(&c.prev, &c.new).expect("exact runs");
        if e.u != c.u || e.count != c.count || e.total != c.total {
            o.failures.push(format!(
                "exact case {i}: got U={} {}/{}, want U={} {}/{}",
                e.u, e.count, e.total, c.u, c.count, c.total
            ));
        }
        let want_p = c.count as f64 / c.total as f64;
        if e.p_value() != want_p {
            o.failures.push(format!("exact case {i}: p {} != {want_p}", e.p_value()));
        }
    }
    o
}

pub fn mw_approx(f: &Fixture, tol: f64) -> Outcome {
    let mut o = Outcome::new();
    for (i, c) in f.mann_whitney_approx.iter().enumerate() {
        o.cases += 1;
        let (u, p) = mann_whitney_normal(&c.prev, &c.new).expect("approx runs");
        o.check("mw U", i, u, c.u, 0.0);
        o.check("mw p", i, p, c.p, tol);
    }
    o
}

pub fn shapiro(f: &Fixture, tol_p: f64) -> Outcome {
    let mut o = Outcome::new();
    for (i, c) in f.shapiro_wilk.iter().enumerate() {
        o.cases += 1;
        let (w, p) = shapiro_wilk(&c.sample).expect("shapiro runs");
        o.check("sw W", i, w, c.w, tol_p);
        o.check("sw p", i, p, c.p, tol_p);
    }
    o
}

pub fn selection(f: &Fixture, alpha_normality: f64) -> Outcome {
    let mut o = Outcome::new();
    for (i, c) in f.select_test.iter().enumerate() {
        o.cases += 1;
        let normal = |p: Option<f64>| p.map(|p| p > alpha_normality);
        let want = match (normal(c.p_prev), normal(c.p_new)) {
            (None, None) => TestKind::Welch,
            (Some(true), Some(true)) => TestKind::Welch,
            _ => TestKind::MannWhitney,
        };
        let got = select_test(&c.prev, &c.new, alpha_normality);
        if got != want {
            o.failures.push(format!("select case {i}: got {got:?}, want {want:?}"));
        }
    }
    o
}
