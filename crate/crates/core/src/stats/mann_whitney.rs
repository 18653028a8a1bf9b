use super::special::normal_sf;
use super::{StatError, TestKind, TestResult};

/// Combined sample sizes up to this use exact enumeration.
pub const EXACT_CUTOFF: usize = 20;

/// One-sided Mann-Whitney U test of "new stochastically greater than prev".
/// The statistic is U for the new window.
pub fn mann_whitney_one_sided(prev: &[f64], new: &[f64]) -> Result<TestResult, StatError> {
    let (u, p_value) = if prev.len() + new.len() <= EXACT_CUTOFF {
        let exact = exact(prev, new)?;
        (exact.u, exact.p_value())
    } else {
        normal_approx(prev, new)?
    };
    Ok(TestResult {
        test: TestKind::MannWhitney,
        statistic: u,
        degrees_of_freedom: None,
        p_value: p_value.clamp(0.0, 1.0),
    })
}

/// Exact tail count under the permutation null, conditional on ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactTail {
    pub u: f64,
    /// Rank assignments with a new-window rank sum at least the observed one.
    pub count: u64,
    /// All `C(n_prev + n_new, n_new)` assignments.
    pub total: u64,
}

impl ExactTail {
    pub fn p_value(&self) -> f64 {
        self.count as f64 / self.total as f64
    }
}

struct Ranked {
    /// `(doubled midrank, group size, members from new)` per tie group.
    groups: Vec<(usize, usize, usize)>,
    doubled_rank_sum_new: usize,
    tie_term: f64,
}

fn rank(prev: &[f64], new: &[f64]) -> Result<Ranked, StatError> {
    for s in [prev, new] {
        if s.is_empty() {
            return Err(StatError::SampleTooSmall { needed: 1, got: 0 });
        }
    }
    let mut pooled: Vec<(f64, bool)> = prev
        .iter()
        .map(|&v| (v, false))
        .chain(new.iter().map(|&v| (v, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut groups = Vec::new();
    let mut doubled_rank_sum_new = 0;
    let mut tie_term = 0.0;
    let mut start = 0;
    while start < pooled.len() {
        let end = start + pooled[start..]
            .iter()
            .take_while(|(v, _)| *v == pooled[start].0)
            .count();
        let size = end - start;
        let doubled = 2 * start + size + 1;
        let from_new = pooled[start..end].iter().filter(|(_, is_new)| *is_new).count();
        doubled_rank_sum_new += doubled * from_new;
        let t = size as f64;
        tie_term += t * t * t - t;
        groups.push((doubled, size, from_new));
        start = end;
    }
    Ok(Ranked {
        groups,
        doubled_rank_sum_new,
        tie_term,
    })
}

fn u_from(doubled_rank_sum: usize, n_new: usize) -> f64 {
    doubled_rank_sum as f64 / 2.0 - (n_new * (n_new + 1)) as f64 / 2.0
}

/// Exact enumeration over which pooled positions the new window occupies,
/// by dynamic programming over tie groups.
pub fn exact(prev: &[f64], new: &[f64]) -> Result<ExactTail, StatError> {
    let n = prev.len() + new.len();
    if n > 62 {
        return Err(StatError::SampleTooLarge { limit: 62, got: n });
    }
    let ranked = rank(prev, new)?;
    let k = new.len();
    let max_sum = n * (n + 1);
    // ways[j][s]: choices of j new members so far with doubled rank sum s.
    let mut ways = vec![vec![0u64; max_sum + 1]; k + 1];
    ways[0][0] = 1;
    for &(doubled, size, _) in &ranked.groups {
        let mut next = vec![vec![0u64; max_sum + 1]; k + 1];
        for j in 0..=k {
            for s in 0..=max_sum {
                let w = ways[j][s];
                if w == 0 {
                    continue;
                }
                for m in 0..=size.min(k - j) {
                    next[j + m][s + m * doubled] += w * binomial(size, m);
                }
            }
        }
        ways = next;
    }
    let count = ways[k][ranked.doubled_rank_sum_new..].iter().sum();
    Ok(ExactTail {
        u: u_from(ranked.doubled_rank_sum_new, k),
        count,
        total: binomial(n, k),
    })
}

/// Normal approximation with tie-corrected variance and a continuity
/// correction of one half. Returns `(U, p)`.
pub fn normal_approx(prev: &[f64], new: &[f64]) -> Result<(f64, f64), StatError> {
    let ranked = rank(prev, new)?;
    let (n1, n2) = (new.len() as f64, prev.len() as f64);
    let n = n1 + n2;
    let u = u_from(ranked.doubled_rank_sum_new, new.len());
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ranked.tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        // Every value tied: no evidence either way.
        return Ok((u, 1.0));
    }
    let z = (u - mu - 0.5) / var.sqrt();
    Ok((u, normal_sf(z)))
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128) as u64
}
