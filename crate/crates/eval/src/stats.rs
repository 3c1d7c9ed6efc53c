//! Paired two-sided Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EvalError, Result};

/// Largest number of non-zero pairs handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Wilcoxon {
    pub p_value: f64,
    /// Sum of ranks of the positive differences `a - b`.
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
    pub warning: Option<String>,
}

/// Average ranks (1-based) of `values`, which need not be sorted.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Exact two-sided p for `W+` under the null, enumerating all sign
/// assignments through a subset-sum count over doubled (integer) ranks.
fn exact_p(doubled: &[usize], w_plus_doubled: usize) -> f64 {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(doubled.len() as i32);
    let lower: f64 = counts[..=w_plus_doubled].iter().sum::<f64>() / all;
    let upper: f64 = counts[w_plus_doubled..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite sample".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(Wilcoxon {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            warning: Some("all paired differences are zero".into()),
        });
    }
    if n < MIN_PAIRS {
        return Err(EvalError::Invalid(format!("{n} non-zero pairs; at least {MIN_PAIRS} are required")));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let p = exact_p(&doubled, (2.0 * w_plus).round() as usize);
        return Ok(Wilcoxon { p_value: p, w_plus, n, exact: true, warning: None });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean).abs() / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(Wilcoxon { p_value: p, w_plus, n, exact: false, warning: None })
}
