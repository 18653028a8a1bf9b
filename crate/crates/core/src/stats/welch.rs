use super::special::student_t_sf;
use super::{mean, variance, StatError, TestKind, TestResult};

/// One-sided Welch t-test of `mean(new) > mean(prev)`.
///
/// When both windows have zero variance the test degenerates: p is 0 for a
/// strict improvement and 1 otherwise.
pub fn welch_one_sided(prev: &[f64], new: &[f64]) -> Result<TestResult, StatError> {
    for s in [prev, new] {
        if s.len() < 2 {
            return Err(StatError::SampleTooSmall {
                needed: 2,
                got: s.len(),
            });
        }
    }
    let (n_prev, n_new) = (prev.len() as f64, new.len() as f64);
    let diff = mean(new) - mean(prev);
    let q_prev = variance(prev) / n_prev;
    let q_new = variance(new) / n_new;
    let se2 = q_prev + q_new;
    if se2 == 0.0 {
        return Ok(TestResult {
            test: TestKind::Welch,
            statistic: 0.0,
            degrees_of_freedom: None,
            p_value: if diff > 0.0 { 0.0 } else { 1.0 },
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (q_prev * q_prev / (n_prev - 1.0) + q_new * q_new / (n_new - 1.0));
    Ok(TestResult {
        test: TestKind::Welch,
        statistic: t,
        degrees_of_freedom: Some(df),
        p_value: student_t_sf(t, df).clamp(0.0, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_rules() {
        let three = [3.0; 5];
        assert_eq!(welch_one_sided(&three, &three).unwrap().p_value, 1.0);
        assert_eq!(welch_one_sided(&three, &[5.0; 5]).unwrap().p_value, 0.0);
        assert_eq!(welch_one_sided(&[5.0; 5], &three).unwrap().p_value, 1.0);
    }

    #[test]
    fn too_small() {
        assert_eq!(
            welch_one_sided(&[1.0], &[1.0, 2.0]),
            Err(StatError::SampleTooSmall { needed: 2, got: 1 })
        );
    }

    #[test]
    fn reference_case() {
        // scipy.stats.ttest_ind(new, prev, equal_var=False, alternative="greater")
        let r = welch_one_sided(&[3.0, 3.0, 4.0, 2.0, 3.0], &[4.0, 5.0, 4.0, 4.0, 5.0]).unwrap();
        assert!((r.statistic - 3.500000000000001).abs() < 1e-9);
        assert!((r.degrees_of_freedom.unwrap() - 7.529411764705882).abs() < 1e-9);
        assert!((r.p_value - 0.004446648777752139).abs() < 1e-9);
    }

    #[test]
    fn swap_crosses_half() {
        let a = [2.0, 3.0, 3.0, 4.0];
        let b = [3.0, 4.0, 5.0, 4.0];
        let fwd = welch_one_sided(&a, &b).unwrap().p_value;
        let rev = welch_one_sided(&b, &a).unwrap().p_value;
        assert!(fwd < 0.5 && rev > 0.5);
        assert!((fwd + rev - 1.0).abs() < 1e-12);
    }
}
