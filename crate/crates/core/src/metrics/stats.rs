//! Quantiles and the two-sided Mann-Whitney U test.

use super::MetricsError;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest `n1 * n2` for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 64;

/// Linear-interpolation quantile (`q` in `[0, 1]`) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// `Q3 - Q1`.
pub fn iqr(values: &[f64]) -> Option<f64> {
    Some(quantile(values, 0.75)? - quantile(values, 0.25)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    /// `min(U_a, U_b)`.
    pub u: f64,
    pub p_two_sided: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: TestMethod,
    /// `U_a`: pairs where the first sample is larger, ties counted as one half.
    pub u_a: f64,
}

/// Number of arrangements with each value of U, for sample sizes `m` and `n`.
fn u_distribution(m: usize, n: usize) -> Vec<f64> {
    // counts[i][j][u] built incrementally over (i, j) with a rolling table.
    let max_u = m * n;
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            let mut row = vec![0.0; i * j + 1];
            if i == 0 || j == 0 {
                row[0] = 1.0;
            } else {
                // Largest element from the first sample beats all j of the second.
                for (u, c) in table[i - 1][j].iter().enumerate() {
                    row[u + j] += c;
                }
                for (u, c) in table[i][j - 1].iter().enumerate() {
                    row[u] += c;
                }
            }
            table[i][j] = row;
        }
    }
    let out = std::mem::take(&mut table[m][n]);
    debug_assert_eq!(out.len(), max_u + 1);
    out
}

/// Two-sided Mann-Whitney U test.
///
/// Uses the exact null distribution for small tie-free samples, otherwise the
/// normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatTestResult, MetricsError> {
    mann_whitney_u_using(a, b, None)
}

/// [`mann_whitney_u`] with the method forced. The exact method rejects ties.
pub fn mann_whitney_u_using(a: &[f64], b: &[f64], method: Option<TestMethod>) -> Result<StatTestResult, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(MetricsError::NonFinite);
    }
    let (n1, n2) = (a.len(), b.len());
    let mut u_a = 0.0f64;
    for &x in a {
        for &y in b {
            if x > y {
                u_a += 1.0;
            } else if x == y {
                u_a += 0.5;
            }
        }
    }
    let prod = (n1 * n2) as f64;
    let u = u_a.min(prod - u_a);

    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let clamp = |p: f64| p.clamp(f64::MIN_POSITIVE, 1.0);

    let exact = match method {
        Some(TestMethod::Exact) if tie_term > 0.0 => return Err(MetricsError::TiesInExactTest),
        Some(m) => m == TestMethod::Exact,
        None => n1 * n2 <= EXACT_LIMIT && tie_term == 0.0,
    };
    if exact {
        let dist = u_distribution(n1, n2);
        let total: f64 = dist.iter().sum();
        let below: f64 = dist[..=u as usize].iter().sum();
        return Ok(StatTestResult {
            u,
            p_two_sided: clamp(2.0 * below / total),
            n1,
            n2,
            method: TestMethod::Exact,
            u_a,
        });
    }

    let n = (n1 + n2) as f64;
    let mean = prod / 2.0;
    let var = prod / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(StatTestResult {
        u,
        p_two_sided: clamp(p),
        n1,
        n2,
        method: TestMethod::NormalApprox,
        u_a,
    })
}
