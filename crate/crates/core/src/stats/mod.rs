//! Statistical tests used by the gate and the drift monitors.
//!
//! Every test here is one-sided with the alternative that the *new* window
//! is better than the *previous* one. All functions are pure and
//! deterministic.

pub mod drift;
mod mann_whitney;
mod shapiro;
pub mod special;
mod welch;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use drift::{DriftConfig, DriftMonitorState, DriftParams};
pub use mann_whitney::{
    exact as mann_whitney_exact, mann_whitney_one_sided, normal_approx as mann_whitney_normal,
    ExactTail, EXACT_CUTOFF,
};
pub use shapiro::shapiro_wilk;
pub use welch::welch_one_sided;

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum StatError {
    #[error("sample too small: need at least {needed}, got {got}")]
    SampleTooSmall { needed: usize, got: usize },
    #[error("sample too large: at most {limit} values supported, got {got}")]
    SampleTooLarge { limit: usize, got: usize },
    #[error("constant sample")]
    ConstantSample,
    #[error("rating {0} outside 1..=5")]
    InvalidRating(i64),
}

/// A window of Likert ratings, each in `1..=5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Sample {
    ratings: Vec<u8>,
    values: Vec<f64>,
}

impl Sample {
    pub fn from_ratings(ratings: &[u8]) -> Result<Self, StatError> {
        if ratings.is_empty() {
            return Err(StatError::SampleTooSmall { needed: 1, got: 0 });
        }
        if let Some(&bad) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
            return Err(StatError::InvalidRating(bad.into()));
        }
        Ok(Sample {
            ratings: ratings.to_vec(),
            values: ratings.iter().map(|&r| f64::from(r)).collect(),
        })
    }

    pub fn ratings(&self) -> &[u8] {
        &self.ratings
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

impl TryFrom<Vec<u8>> for Sample {
    type Error = StatError;
    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        Sample::from_ratings(&v)
    }
}

impl From<Sample> for Vec<u8> {
    fn from(s: Sample) -> Self {
        s.ratings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Welch,
    MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Normal-approximation 95% confidence interval for a window mean.
pub fn mean_ci95(x: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 {
        return None;
    }
    let m = mean(x);
    let half = 1.959_963_984_540_054 * (variance(x) / x.len() as f64).sqrt();
    Some((m - half, m + half))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Normality {
    Plausible,
    Rejected,
    Constant,
}

fn normality(x: &[f64], alpha_normality: f64) -> Normality {
    match shapiro_wilk(x) {
        Ok((_, p)) if p > alpha_normality => Normality::Plausible,
        Ok(_) => Normality::Rejected,
        Err(StatError::ConstantSample) => Normality::Constant,
        // Too few points to assess normality: treated as a failed check.
        Err(_) => Normality::Rejected,
    }
}

/// Welch when both windows look normal (or both are constant, which the
/// Welch degenerate rule handles), Mann-Whitney otherwise.
pub fn select_test(prev: &[f64], new: &[f64], alpha_normality: f64) -> TestKind {
    use Normality::*;
    match (normality(prev, alpha_normality), normality(new, alpha_normality)) {
        (Plausible, Plausible) | (Constant, Constant) => TestKind::Welch,
        _ => TestKind::MannWhitney,
    }
}

pub fn run_test(kind: TestKind, prev: &[f64], new: &[f64]) -> Result<TestResult, StatError> {
    match kind {
        TestKind::Welch => welch_one_sided(prev, new),
        TestKind::MannWhitney => mann_whitney_one_sided(prev, new),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_out_of_range() {
        assert_eq!(Sample::from_ratings(&[1, 6]), Err(StatError::InvalidRating(6)));
        assert!(Sample::from_ratings(&[]).is_err());
        assert_eq!(Sample::from_ratings(&[1, 5]).unwrap().mean(), 3.0);
    }

    #[test]
    fn sample_serializes_as_list() {
        let s = Sample::from_ratings(&[3, 4]).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), "[3,4]");
        assert!(serde_json::from_str::<Sample>("[0]").is_err());
    }

    #[test]
    fn both_constant_selects_welch() {
        assert_eq!(select_test(&[3.0; 5], &[4.0; 5], 0.05), TestKind::Welch);
    }

    #[test]
    fn one_constant_selects_mann_whitney() {
        assert_eq!(
            select_test(&[3.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], 0.05),
            TestKind::MannWhitney
        );
    }

    #[test]
    fn ci_brackets_mean() {
        let (lo, hi) = mean_ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(lo < 3.0 && 3.0 < hi);
        assert_eq!(mean_ci95(&[1.0]), None);
    }
}
