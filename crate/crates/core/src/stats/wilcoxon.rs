//! Clustered Wilcoxon signed-rank test (Rosner, Glynn & Lee 2006).
//!
//! Paired differences that share a cluster (e.g. several image pairs of
//! one participant) are not independent; the test ranks all nonzero
//! differences together, sums signed ranks within each cluster, and
//! refers T = sum of cluster sums to a normal with variance equal to the
//! sum of squared cluster sums — the exact variance under independent
//! within-cluster sign flips.

use std::collections::BTreeMap;

use crate::error::{IguaneError, Result};
use crate::stats::{average_ranks, normal_two_tailed_p};

#[derive(Debug, Clone)]
pub struct ClusteredWilcoxon {
    pub z: f64,
    pub p: f64,
    /// Signed rank sum per cluster, keyed by cluster id.
    pub cluster_sums: BTreeMap<String, f64>,
    /// Nonzero differences that entered the ranking.
    pub n_used: usize,
}

/// Runs the test on `(cluster id, difference)` pairs. Zero differences
/// are dropped; all differences zero is an undefined result.
pub fn clustered_signed_rank(diffs: &[(String, f64)]) -> Result<ClusteredWilcoxon> {
    if diffs.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "clustered_signed_rank: no differences".into(),
        ));
    }
    if diffs.iter().any(|(_, d)| !d.is_finite()) {
        return Err(IguaneError::Validation(
            "clustered_signed_rank: non-finite difference".into(),
        ));
    }
    let nonzero: Vec<(&str, f64)> = diffs
        .iter()
        .filter(|(_, d)| *d != 0.0)
        .map(|(c, d)| (c.as_str(), *d))
        .collect();
    if nonzero.is_empty() {
        return Err(IguaneError::UndefinedResult(
            "clustered_signed_rank: all differences are zero".into(),
        ));
    }
    let abs: Vec<f64> = nonzero.iter().map(|(_, d)| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let mut cluster_sums: BTreeMap<String, f64> = BTreeMap::new();
    for ((cluster, d), rank) in nonzero.iter().zip(ranks.iter()) {
        *cluster_sums.entry(cluster.to_string()).or_insert(0.0) +=
            if *d > 0.0 { *rank } else { -*rank };
    }
    let t: f64 = cluster_sums.values().sum();
    let var: f64 = cluster_sums.values().map(|&s| s * s).sum();
    if var == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "clustered_signed_rank: zero variance (all cluster sums are zero)".into(),
        ));
    }
    let z = t / var.sqrt();
    Ok(ClusteredWilcoxon {
        z,
        p: normal_two_tailed_p(z),
        cluster_sums,
        n_used: nonzero.len(),
    })
}

/// Exact permutation p-value over all 2^K within-cluster sign flips.
/// Intended for small K (guarded at 20 clusters); the acceptance oracle
/// for the normal approximation.
pub fn clustered_signed_rank_exact(diffs: &[(String, f64)]) -> Result<f64> {
    let result = clustered_signed_rank(diffs)?;
    let sums: Vec<f64> = result.cluster_sums.values().copied().collect();
    let k = sums.len();
    if k > 20 {
        return Err(IguaneError::Validation(format!(
            "exact permutation limited to 20 clusters, got {k}"
        )));
    }
    let t_obs: f64 = sums.iter().sum::<f64>().abs();
    let mut hits = 0u64;
    let total = 1u64 << k;
    for mask in 0..total {
        let mut t = 0.0;
        for (i, &s) in sums.iter().enumerate() {
            if mask & (1 << i) != 0 {
                t -= s;
            } else {
                t += s;
            }
        }
        // tolerance for float round-off in tie comparisons
        if t.abs() >= t_obs - 1e-12 {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
