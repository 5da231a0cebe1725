//! Statistics used to train, validate, and judge harmonization.
//!
//! Everything here is deterministic and accepts plain slices; the
//! evaluation layer decides what goes in. Functions return
//! `UndefinedResult` when the requested quantity does not exist
//! (zero variance, empty input) instead of silently yielding NaN.

pub mod bh;
pub mod distance;
pub mod ssim;
pub mod steiger;
pub mod wilcoxon;

pub use bh::benjamini_hochberg;
pub use distance::{distance_preservation, pairwise_distances, DistancePreservation};
pub use ssim::{ssim, SsimOptions};
pub use steiger::steiger_dependent_correlations;
pub use wilcoxon::{clustered_signed_rank, clustered_signed_rank_exact};

use crate::error::{IguaneError, Result};

// ======================================================================
// Normal distribution helpers
// ======================================================================

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-tailed p-value for a standard normal statistic.
pub fn normal_two_tailed_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Fisher's variance-stabilizing transform, `atanh(r)`.
pub fn fisher_z(r: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&r) {
        return Err(IguaneError::Validation(format!(
            "correlation {r} outside [-1, 1]"
        )));
    }
    if r.abs() == 1.0 {
        return Err(IguaneError::UndefinedResult(
            "Fisher z is infinite at |r| = 1".into(),
        ));
    }
    Ok(r.atanh())
}

// ======================================================================
// Moments, correlation, regression
// ======================================================================

fn check_paired(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(IguaneError::Validation(format!(
            "{what}: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(IguaneError::DegenerateInput(format!(
            "{what}: need at least 2 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(IguaneError::Validation(format!("{what}: non-finite input")));
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n-1 denominator).
pub fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y, "pearson")?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "pearson: zero variance in an input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation with nonnegative per-pair weights (normalized to
/// sum to one internally). Equal weights reproduce [`pearson`] exactly.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Result<f64> {
    check_paired(x, y, "weighted_pearson")?;
    if w.len() != x.len() {
        return Err(IguaneError::Validation(format!(
            "weighted_pearson: {} weights for {} pairs",
            w.len(),
            x.len()
        )));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(IguaneError::Validation(
            "weighted_pearson: weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(IguaneError::DegenerateInput(
            "weighted_pearson: weights sum to zero".into(),
        ));
    }
    let wn: Vec<f64> = w.iter().map(|&v| v / total).collect();
    let mx: f64 = wn.iter().zip(x.iter()).map(|(&w, &v)| w * v).sum();
    let my: f64 = wn.iter().zip(y.iter()).map(|(&w, &v)| w * v).sum();
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for ((&a, &b), &w) in x.iter().zip(y.iter()).zip(wn.iter()) {
        sxx += w * (a - mx) * (a - mx);
        syy += w * (b - my) * (b - my);
        sxy += w * (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "weighted_pearson: zero weighted variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ordinary least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<Regression> {
    check_paired(x, y, "linear_regression")?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "linear_regression: zero variance in x".into(),
        ));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0 // a constant y is fit exactly by the constant line
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Coefficient of determination of predictions against observations:
/// `1 - SS_res / SS_tot`. Unlike squared correlation this punishes bias,
/// which is what the validation score wants.
pub fn r2_score(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_paired(observed, predicted, "r2_score")?;
    let m = mean(observed);
    let ss_tot: f64 = observed.iter().map(|&v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "r2_score: observations have zero variance".into(),
        ));
    }
    let ss_res: f64 = observed
        .iter()
        .zip(predicted.iter())
        .map(|(&o, &p)| (o - p) * (o - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Cohen's d with the pooled standard deviation on n_a + n_b - 2
/// degrees of freedom.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(IguaneError::DegenerateInput(format!(
            "cohens_d: need at least 2 per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * sample_var(a) + (nb - 1.0) * sample_var(b)) / (na + nb - 2.0);
    if pooled <= 0.0 {
        return Err(IguaneError::UndefinedResult(
            "cohens_d: pooled variance is zero".into(),
        ));
    }
    Ok((mean(a) - mean(b)) / pooled.sqrt())
}

/// One-way random-effects intraclass correlation ICC(1,1); groups may
/// have unequal sizes (k0 correction).
pub fn icc_1_1(groups: &[Vec<f64>]) -> Result<f64> {
    let a = groups.len();
    if a < 2 {
        return Err(IguaneError::DegenerateInput(
            "icc: need at least 2 groups".into(),
        ));
    }
    let n_total: usize = groups.iter().map(Vec::len).sum();
    if groups.iter().any(|g| g.is_empty()) || n_total <= a {
        return Err(IguaneError::DegenerateInput(
            "icc: every group needs at least one value and some group two".into(),
        ));
    }
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let gm = mean(g);
        ssb += g.len() as f64 * (gm - grand) * (gm - grand);
        ssw += g.iter().map(|&v| (v - gm) * (v - gm)).sum::<f64>();
    }
    let msb = ssb / (a as f64 - 1.0);
    let msw = ssw / (n_total - a) as f64;
    let k0 = (n_total as f64
        - groups.iter().map(|g| (g.len() * g.len()) as f64).sum::<f64>() / n_total as f64)
        / (a as f64 - 1.0);
    let denom = msb + (k0 - 1.0) * msw;
    if denom == 0.0 {
        return Err(IguaneError::UndefinedResult(
            "icc: zero total mean square".into(),
        ));
    }
    Ok((msb - msw) / denom)
}

// ======================================================================
// Order statistics
// ======================================================================

/// Percentile with linear interpolation between order statistics
/// (position q/100 * (n-1)).
pub fn percentile(vals: &[f64], q: f64) -> Result<f64> {
    if vals.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "percentile of empty slice".into(),
        ));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(IguaneError::Validation(format!(
            "percentile {q} outside [0, 100]"
        )));
    }
    let mut sorted: Vec<f64> = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Ranks (1-based) with ties sharing their average rank.
pub fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn normal_cdf_reference_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-12);
        assert_relative_eq!(normal_cdf(-1.6448536269514722), 0.05, epsilon = 1e-12);
        assert_relative_eq!(normal_two_tailed_p(1.959963984540054), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn pearson_basics() {
        assert_relative_eq!(
            pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        // hand-computed: x={0,1,2,3}, y={1,0,2,4}
        // mx=1.5 my=1.75, sxy=4.5+... -> compute: dev x {-1.5,-.5,.5,1.5}, y {-.75,-1.75,.25,2.25}
        // sxy = 1.125+0.875+0.125+3.375 = 5.5; sxx=5; syy=0.5625+3.0625+0.0625+5.0625=8.75
        let r = pearson(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(r, 5.5 / (5.0f64 * 8.75).sqrt(), epsilon = 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 2.0]).unwrap_err(),
            IguaneError::UndefinedResult(_)
        ));
    }

    #[test]
    fn weighted_pearson_equal_weights_matches_plain() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 0.7 * v + rng.gen_range(-1.0..1.0))
            .collect();
        let w = vec![0.025; 40];
        let a = pearson(&x, &y).unwrap();
        let b = weighted_pearson(&x, &y, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
        // scaling all weights equally changes nothing
        let w2 = vec![17.3; 40];
        let c = weighted_pearson(&x, &y, &w2).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn weighted_pearson_downweights_points() {
        // Two copies of a point with weight 1/2 each behave like one copy.
        let x1 = vec![0.0, 1.0, 2.0, 5.0];
        let y1 = vec![0.1, 0.9, 2.2, 1.0];
        let w1 = vec![1.0, 1.0, 1.0, 1.0];
        let x2 = vec![0.0, 1.0, 2.0, 5.0, 5.0];
        let y2 = vec![0.1, 0.9, 2.2, 1.0, 1.0];
        let w2 = vec![1.0, 1.0, 1.0, 0.5, 0.5];
        let r1 = weighted_pearson(&x1, &y1, &w1).unwrap();
        let r2 = weighted_pearson(&x2, &y2, &w2).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn regression_and_r2() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let reg = linear_regression(&x, &y).unwrap();
        assert_relative_eq!(reg.slope, 2.0, epsilon = 1e-12);
        assert_relative_eq!(reg.intercept, 1.0, epsilon = 1e-12);
        assert_relative_eq!(reg.r2, 1.0, epsilon = 1e-12);
        // r2_score punishes biased predictions even at correlation 1
        let obs = [1.0, 2.0, 3.0, 4.0];
        let pred = [2.0, 3.0, 4.0, 5.0];
        let r2 = r2_score(&obs, &pred).unwrap();
        assert_relative_eq!(r2, 1.0 - 4.0 / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn cohens_d_worked_example() {
        // a={0,2}, b={4,6}: means 1 and 5, pooled sd sqrt(2) -> d = -4/sqrt(2)
        let d = cohens_d(&[0.0, 2.0], &[4.0, 6.0]).unwrap();
        assert_relative_eq!(d, -2.0 * std::f64::consts::SQRT_2, epsilon = 1e-12);
        let d2 = cohens_d(&[4.0, 6.0], &[0.0, 2.0]).unwrap();
        assert_relative_eq!(d2, 2.0 * std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn icc_hand_example() {
        // groups with strong separation: MSB=8, MSW=0.5, k=2
        let icc = icc_1_1(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_relative_eq!(icc, 7.5 / 8.5, epsilon = 1e-12);
        // identical raters -> ICC 1
        let icc1 = icc_1_1(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        assert_relative_eq!(icc1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_relative_eq!(percentile(&v, 0.0).unwrap(), 10.0);
        assert_relative_eq!(percentile(&v, 100.0).unwrap(), 40.0);
        assert_relative_eq!(percentile(&v, 50.0).unwrap(), 25.0);
        assert_relative_eq!(percentile(&v, 99.0).unwrap(), 39.7, epsilon = 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn fisher_z_bounds() {
        assert_relative_eq!(fisher_z(0.5).unwrap(), 0.5f64.atanh());
        assert!(fisher_z(1.0).is_err());
        assert!(fisher_z(1.5).is_err());
    }
}
