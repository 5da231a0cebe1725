//! WhiteStripe normalization: locate the normal-appearing white-matter
//! mode of the brain-intensity histogram, take the "white stripe" of
//! voxels within a +/-5% quantile window around it, and z-score the
//! volume by the stripe's mean and standard deviation.

use ndarray::Zip;

use crate::error::{IguaneError, Result};
use crate::stats::percentile;
use crate::volume::{Space, Volume};

/// Number of histogram bins used for mode detection.
pub const HIST_BINS: usize = 256;

/// Gaussian smoothing bandwidth, in bins.
pub const SMOOTH_BANDWIDTH: f64 = 2.0;

/// Half-width of the stripe's quantile window.
pub const STRIPE_TAU: f64 = 0.05;

/// The statistics WhiteStripe derives from one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeStats {
    /// Intensity of the detected white-matter mode.
    pub mode: f64,
    /// Lower intensity bound of the stripe window.
    pub stripe_low: f64,
    /// Upper intensity bound of the stripe window.
    pub stripe_high: f64,
    /// Mean intensity of the stripe voxels.
    pub mean: f64,
    /// Sample standard deviation of the stripe voxels.
    pub sd: f64,
    /// Number of voxels in the stripe.
    pub n_stripe: usize,
}

/// Histogram of `vals` over `[lo, hi]` with [`HIST_BINS`] equal bins.
fn histogram(vals: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![0.0; HIST_BINS];
    let width = (hi - lo) / HIST_BINS as f64;
    for &v in vals {
        let b = (((v - lo) / width) as usize).min(HIST_BINS - 1);
        counts[b] += 1.0;
    }
    counts
}

/// Smooths `counts` with a truncated Gaussian kernel of the given
/// bandwidth (in bins), renormalized at the boundaries.
fn smooth(counts: &[f64], bandwidth: f64) -> Vec<f64> {
    let radius = (4.0 * bandwidth).ceil() as isize;
    let n = counts.len() as isize;
    let mut out = vec![0.0; counts.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for d in -radius..=radius {
            let j = i as isize + d;
            if j < 0 || j >= n {
                continue;
            }
            let w = (-0.5 * (d as f64 / bandwidth).powi(2)).exp();
            acc += w * counts[j as usize];
            norm += w;
        }
        *o = acc / norm;
    }
    out
}

/// Index of the last local maximum of `y` (a bin at least as high as both
/// neighbors, strictly higher than at least one; boundaries compare
/// one-sided).
fn last_local_max(y: &[f64]) -> Option<usize> {
    let n = y.len();
    (0..n).rev().find(|&i| {
        let left_ok = i == 0 || y[i] >= y[i - 1];
        let right_ok = i + 1 == n || y[i] >= y[i + 1];
        let strict = (i > 0 && y[i] > y[i - 1]) || (i + 1 < n && y[i] > y[i + 1]);
        left_ok && right_ok && strict
    })
}

/// Computes the stripe statistics of a preprocessed volume: NAWM mode from
/// the smoothed 256-bin brain histogram (the last local maximum), stripe
/// window at +/-5% quantile around the mode, then stripe mean and sample
/// standard deviation.
pub fn stripe_stats(vol: &Volume) -> Result<StripeStats> {
    if vol.space != Space::Preprocessed {
        return Err(IguaneError::State(format!(
            "whitestripe expects a Preprocessed volume, got {:?}",
            vol.space
        )));
    }
    let vals = vol.brain_values();
    if vals.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "volume mask contains no voxels".into(),
        ));
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(IguaneError::DegenerateInput(
            "brain intensities are constant; whitestripe cannot find a mode".into(),
        ));
    }

    let counts = histogram(&vals, lo, hi);
    let smoothed = smooth(&counts, SMOOTH_BANDWIDTH);
    let mode_bin = last_local_max(&smoothed).ok_or_else(|| {
        IguaneError::DegenerateInput(
            "smoothed brain histogram is flat; whitestripe cannot find a mode".into(),
        )
    })?;
    let width = (hi - lo) / HIST_BINS as f64;
    let mode = lo + (mode_bin as f64 + 0.5) * width;

    // Quantile rank of the mode, then the +/- tau window in intensity.
    let rank = vals.iter().filter(|&&v| v <= mode).count() as f64 / vals.len() as f64;
    let q_lo = ((rank - STRIPE_TAU) * 100.0).clamp(0.0, 100.0);
    let q_hi = ((rank + STRIPE_TAU) * 100.0).clamp(0.0, 100.0);
    let stripe_low = percentile(&vals, q_lo)?;
    let stripe_high = percentile(&vals, q_hi)?;

    let stripe: Vec<f64> = vals
        .iter()
        .copied()
        .filter(|&v| v >= stripe_low && v <= stripe_high)
        .collect();
    if stripe.len() < 2 {
        return Err(IguaneError::DegenerateInput(format!(
            "white stripe holds {} voxel(s); need at least 2",
            stripe.len()
        )));
    }
    let n = stripe.len() as f64;
    let mean = stripe.iter().sum::<f64>() / n;
    let var = stripe.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 0.0 {
        return Err(IguaneError::DegenerateInput(
            "white stripe has zero variance; cannot z-score".into(),
        ));
    }
    Ok(StripeStats {
        mode,
        stripe_low,
        stripe_high,
        mean,
        sd,
        n_stripe: stripe.len(),
    })
}

/// WhiteStripe-normalizes a preprocessed volume: brain voxels are
/// z-scored by the stripe mean and standard deviation; background stays
/// at 0. The output remains in the Preprocessed space tag (it is a
/// per-image normalization, not a model-space mapping).
pub fn whitestripe(vol: &Volume) -> Result<Volume> {
    let stats = stripe_stats(vol)?;
    let mut out = vol.clone();
    Zip::from(&mut out.data).and(&out.mask).for_each(|v, &m| {
        *v = if m { (*v - stats.mean) / stats.sd } else { 0.0 };
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::config::stream_rng;

    /// A three-tissue synthetic brain: CSF, GM, and WM Gaussians with WM
    /// the brightest and (by count) the dominant upper peak.
    fn three_tissue(seed: u64) -> (Volume, f64) {
        let mut rng = stream_rng(seed, "ws-test");
        let wm_mean = 620.0;
        let specs = [(180.0, 18.0, 2600), (430.0, 22.0, 3200), (wm_mean, 16.0, 4200)];
        let mut vals = Vec::new();
        for (mean, sd, n) in specs {
            let dist = Normal::new(mean, sd).unwrap();
            for _ in 0..n {
                vals.push(dist.sample(&mut rng));
            }
        }
        // Shuffle into a volume with a background border.
        let side = 24;
        let mut data = Array3::zeros((side, side, side));
        let mut mask = Array3::from_elem((side, side, side), false);
        let mut idx = 0;
        'fill: for x in 1..side - 1 {
            for y in 1..side - 1 {
                for z in 1..side - 1 {
                    if idx >= vals.len() {
                        break 'fill;
                    }
                    data[(x, y, z)] = vals[idx];
                    mask[(x, y, z)] = true;
                    idx += 1;
                }
            }
        }
        assert!(idx == vals.len(), "fixture volume too small");
        let vol =
            Volume::new(data, mask, [1.0, 1.0, 1.0], Space::Preprocessed).unwrap();
        (vol, wm_mean)
    }

    #[test]
    fn mode_lands_on_the_white_matter_peak() {
        let (vol, wm_mean) = three_tissue(401);
        let stats = stripe_stats(&vol).unwrap();
        let rel = (stats.mode - wm_mean).abs() / wm_mean;
        assert!(
            rel < 0.02,
            "mode {} is {:.3}% away from WM mean {}",
            stats.mode,
            rel * 100.0,
            wm_mean
        );
    }

    #[test]
    fn stripe_zscore_centers_the_stripe() {
        let (vol, _) = three_tissue(402);
        let stats = stripe_stats(&vol).unwrap();
        let out = whitestripe(&vol).unwrap();
        // Recompute the stripe on the *output* using the input's window
        // membership: those voxels must have mean 0 and sample sd 1.
        let mut stripe_out = Vec::new();
        Zip::from(&vol.data)
            .and(&vol.mask)
            .and(&out.data)
            .for_each(|&orig, &m, &o| {
                if m && orig >= stats.stripe_low && orig <= stats.stripe_high {
                    stripe_out.push(o);
                }
            });
        assert_eq!(stripe_out.len(), stats.n_stripe);
        let n = stripe_out.len() as f64;
        let mean = stripe_out.iter().sum::<f64>() / n;
        let sd = (stripe_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (n - 1.0))
            .sqrt();
        assert!(mean.abs() < 1e-6, "stripe mean {mean}");
        assert!((sd - 1.0).abs() < 1e-6, "stripe sd {sd}");
    }

    #[test]
    fn translation_shifts_the_mode_equivariantly() {
        let (vol, _) = three_tissue(403);
        let a = stripe_stats(&vol).unwrap();
        let c = 137.0;
        let mut shifted = vol.clone();
        Zip::from(&mut shifted.data)
            .and(&shifted.mask)
            .for_each(|v, &m| {
                if m {
                    *v += c;
                }
            });
        let b = stripe_stats(&shifted).unwrap();
        // Same histogram shape over a shifted range: identical bins, so
        // the mode moves by exactly c (to fp precision).
        assert!((b.mode - a.mode - c).abs() < 1e-9, "{} vs {}", b.mode, a.mode);
        assert!((b.mean - a.mean - c).abs() < 1e-9);
        assert!((b.sd - a.sd).abs() < 1e-9);
        // And the normalized outputs are bitwise-comparable to tolerance.
        let oa = whitestripe(&vol).unwrap();
        let ob = whitestripe(&shifted).unwrap();
        Zip::from(&oa.data).and(&ob.data).for_each(|&x, &y| {
            assert!((x - y).abs() < 1e-9);
        });
    }

    #[test]
    fn background_and_mask_are_preserved() {
        let (vol, _) = three_tissue(404);
        let out = whitestripe(&vol).unwrap();
        assert_eq!(out.mask, vol.mask);
        assert_eq!(out.dims(), vol.dims());
        assert_eq!(out.space, Space::Preprocessed);
        Zip::from(&out.data).and(&out.mask).for_each(|&v, &m| {
            if !m {
                assert_eq!(v, 0.0);
            }
        });
    }

    #[test]
    fn constant_brain_is_degenerate() {
        let mut data = Array3::zeros((6, 6, 6));
        let mut mask = Array3::from_elem((6, 6, 6), false);
        for x in 1..5 {
            for y in 1..5 {
                for z in 1..5 {
                    data[(x, y, z)] = 500.0;
                    mask[(x, y, z)] = true;
                }
            }
        }
        let vol = Volume::new(data, mask, [1.0, 1.0, 1.0], Space::Preprocessed).unwrap();
        assert!(matches!(
            stripe_stats(&vol),
            Err(IguaneError::DegenerateInput(_))
        ));
    }

    #[test]
    fn wrong_space_is_a_state_error() {
        let (mut vol, _) = three_tissue(405);
        vol.space = Space::ModelSpace;
        assert!(matches!(stripe_stats(&vol), Err(IguaneError::State(_))));
    }

    #[test]
    fn last_local_max_picks_the_rightmost_peak() {
        // Two peaks: indices 2 and 6.
        let y = [0.0, 1.0, 3.0, 1.0, 2.0, 4.0, 5.0, 2.0, 1.0];
        assert_eq!(last_local_max(&y), Some(6));
        // Plateau peak: the last bin of the plateau qualifies.
        let y = [0.0, 2.0, 2.0, 2.0, 1.0];
        assert_eq!(last_local_max(&y), Some(3));
        // Monotone increasing: boundary max at the end.
        let y = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(last_local_max(&y), Some(3));
        // Flat: no strict neighbor anywhere.
        let y = [1.0, 1.0, 1.0];
        assert_eq!(last_local_max(&y), None);
    }

    #[test]
    fn dark_lesions_do_not_move_the_last_mode() {
        // Hypointense lesions (dark in T1-like contrast) add mass and
        // modes below the tissue peaks, but the *last* mode stays on WM.
        let (mut vol, wm_mean) = three_tissue(406);
        let mut rng = stream_rng(407, "ws-lesion");
        let mut injected = 0;
        let dims = vol.dims();
        'outer: for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    if vol.mask[(x, y, z)] && rng.gen::<f64>() < 0.02 {
                        vol.data[(x, y, z)] = 40.0 + rng.gen::<f64>() * 100.0;
                        injected += 1;
                        if injected >= 120 {
                            break 'outer;
                        }
                    }
                }
            }
        }
        assert!(injected >= 50, "fixture needs some lesion voxels");
        let stats = stripe_stats(&vol).unwrap();
        let rel = (stats.mode - wm_mean).abs() / wm_mean;
        assert!(
            rel < 0.03,
            "mode {} drifted {:.3}% from WM mean {}",
            stats.mode,
            rel * 100.0,
            wm_mean
        );
    }
}
