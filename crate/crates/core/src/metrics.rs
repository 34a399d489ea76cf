//! Distortion and campaign-level measurement helpers.
//!
//! Everything here is plain arithmetic over tensors or pre-extracted rows,
//! so both the attack loops and the report writer share one definition of
//! each number.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Root-mean-square deviation between two equal-shape tensors:
/// `sqrt(sum((a_i - b_i)^2) / n)`. `None` when shapes differ or the tensors
/// are empty.
pub fn rmsd(a: &Tensor, b: &Tensor) -> Option<f64> {
    if !a.same_shape(b) || a.is_empty() {
        return None;
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Some((sq / a.len() as f64).sqrt())
}

/// Mean Euclidean distance over (perturbed, clean) pairs. `None` when the
/// list is empty or any pair's shapes differ.
pub fn avg_distortion<'a, I>(pairs: I) -> Option<f64>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (adv, clean) in pairs {
        if !adv.same_shape(clean) {
            return None;
        }
        total += adv.l2_distance(clean);
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Fraction of `true` entries. `None` on an empty slice (a rate over nothing
/// is not zero).
pub fn success_rate(evaded: &[bool]) -> Option<f64> {
    if evaded.is_empty() {
        return None;
    }
    Some(evaded.iter().filter(|&&e| e).count() as f64 / evaded.len() as f64)
}

/// Nearest-rank percentile (`p` in 0..=100) over an unsorted slice; `None`
/// when the slice is empty or `p` is out of range / non-finite.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Empirical CDF sampled at `bins` equal-width cut points spanning
/// `[min, max]`. Each row is `(upper_edge, fraction of values <= edge)`;
/// the last row's fraction is always 1. A constant sample collapses to a
/// single `(value, 1.0)` row, and an empty one to an empty table.
pub fn cdf_table(values: &[f64], bins: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    if lo == hi {
        return vec![(lo, 1.0)];
    }
    let n = values.len() as f64;
    (1..=bins)
        .map(|k| {
            let edge = lo + (hi - lo) * k as f64 / bins as f64;
            let below = values.iter().filter(|&&v| v <= edge).count() as f64;
            (edge, below / n)
        })
        .collect()
}

/// Render a CDF table as CSV with a fixed two-column header. Plain `{}`
/// float formatting keeps the bytes stable across runs.
pub fn cdf_to_csv(table: &[(f64, f64)]) -> String {
    let mut out = String::from("value,cumulative_fraction\n");
    for (edge, frac) in table {
        out.push_str(&format!("{edge},{frac}\n"));
    }
    out
}

/// One attack attempt reduced to the numbers the aggregate cares about.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStat {
    pub success: bool,
    pub queries: u64,
    pub l2: f64,
    pub rmsd: f64,
    /// Error responses observed during the attempt (any code).
    pub errors: usize,
    pub alerts: u32,
}

/// Per-attack aggregate across a campaign's attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAggregate {
    pub attempts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_queries: f64,
    pub mean_l2: f64,
    pub mean_rmsd: f64,
    /// Fraction of attempts that saw at least one error response.
    pub error_sample_fraction: f64,
    pub total_alerts: u64,
}

impl AttackAggregate {
    /// `None` when there are no attempts to aggregate.
    pub fn from_stats(stats: &[OutcomeStat]) -> Option<Self> {
        if stats.is_empty() {
            return None;
        }
        let n = stats.len() as f64;
        let successes = stats.iter().filter(|s| s.success).count();
        Some(Self {
            attempts: stats.len(),
            successes,
            success_rate: successes as f64 / n,
            mean_queries: stats.iter().map(|s| s.queries as f64).sum::<f64>() / n,
            mean_l2: stats.iter().map(|s| s.l2).sum::<f64>() / n,
            mean_rmsd: stats.iter().map(|s| s.rmsd).sum::<f64>() / n,
            error_sample_fraction: stats.iter().filter(|s| s.errors > 0).count() as f64 / n,
            total_alerts: stats.iter().map(|s| s.alerts as u64).sum(),
        })
    }
}
