//! Structural similarity for 3D volumes with Gaussian windowing.
//!
//! Local statistics use a separable Gaussian window; the index is
//! averaged over positions where the window lies fully inside the
//! volume. The dynamic range is estimated from the data as the 99th
//! percentile of the two volumes' pooled intensities, so callers shift
//! their volumes to a nonnegative range first.

use ndarray::Array3;

use crate::error::{IguaneError, Result};
use crate::stats::percentile;

#[derive(Debug, Clone, Copy)]
pub struct SsimOptions {
    /// Cubic window edge length; must be odd.
    pub window: usize,
    /// Gaussian sigma in voxels.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Fixed dynamic range; `None` estimates the 99th percentile of the
    /// pooled intensities.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

/// Normalized 1D Gaussian taps.
fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable "same" convolution with zero padding; values within
/// half-window of a border are partial sums and must not be read.
fn gaussian_filter(x: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let (d, h, w) = x.dim();
    let half = (taps.len() / 2) as isize;
    let pass = |src: &Array3<f64>, axis: usize| -> Array3<f64> {
        let mut dst = Array3::zeros((d, h, w));
        let n = [d, h, w][axis] as isize;
        for ((i, j, k), out) in dst.indexed_iter_mut() {
            let c = [i as isize, j as isize, k as isize][axis];
            let mut acc = 0.0;
            for (t, &tap) in taps.iter().enumerate() {
                let p = c + t as isize - half;
                if p < 0 || p >= n {
                    continue;
                }
                let idx = match axis {
                    0 => (p as usize, j, k),
                    1 => (i, p as usize, k),
                    _ => (i, j, p as usize),
                };
                acc += tap * src[idx];
            }
            *out = acc;
        }
        dst
    };
    let a = pass(x, 0);
    let b = pass(&a, 1);
    pass(&b, 2)
}

/// Mean SSIM over all fully interior window positions.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, opts: &SsimOptions) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(IguaneError::Validation(format!(
            "ssim: volume dims {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if opts.window % 2 == 0 || opts.window < 3 {
        return Err(IguaneError::Validation(format!(
            "ssim: window must be odd and >= 3, got {}",
            opts.window
        )));
    }
    let (d, h, w) = a.dim();
    let half = opts.window / 2;
    if d < opts.window || h < opts.window || w < opts.window {
        return Err(IguaneError::DegenerateInput(format!(
            "ssim: window {} does not fit in volume {:?}",
            opts.window,
            a.dim()
        )));
    }
    let l = match opts.dynamic_range {
        Some(l) => l,
        None => {
            let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            percentile(&pooled, 99.0)?
        }
    };
    if !(l > 0.0) {
        return Err(IguaneError::DegenerateInput(format!(
            "ssim: nonpositive dynamic range {l}"
        )));
    }
    let c1 = (opts.k1 * l) * (opts.k1 * l);
    let c2 = (opts.k2 * l) * (opts.k2 * l);

    let taps = gaussian_taps(opts.window, opts.sigma);
    let mu_a = gaussian_filter(a, &taps);
    let mu_b = gaussian_filter(b, &taps);
    let s_aa = gaussian_filter(&(a * a), &taps);
    let s_bb = gaussian_filter(&(b * b), &taps);
    let s_ab = gaussian_filter(&(a * b), &taps);

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in half..d - half {
        for j in half..h - half {
            for k in half..w - half {
                let (ma, mb) = (mu_a[(i, j, k)], mu_b[(i, j, k)]);
                let va = s_aa[(i, j, k)] - ma * ma;
                let vb = s_bb[(i, j, k)] - mb * mb;
                let cov = s_ab[(i, j, k)] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_volume(dims: (usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dims, |_| rng.gen_range(lo..hi))
    }

    /// Definitional SSIM: explicit weighted sums inside each window.
    fn ssim_direct(a: &Array3<f64>, b: &Array3<f64>, opts: &SsimOptions) -> f64 {
        let (d, h, w) = a.dim();
        let half = opts.window / 2;
        let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let l = opts
            .dynamic_range
            .unwrap_or_else(|| percentile(&pooled, 99.0).unwrap());
        let c1 = (opts.k1 * l) * (opts.k1 * l);
        let c2 = (opts.k2 * l) * (opts.k2 * l);
        let taps = gaussian_taps(opts.window, opts.sigma);
        let mut acc = 0.0;
        let mut count = 0;
        for ci in half..d - half {
            for cj in half..h - half {
                for ck in half..w - half {
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    let mut saa = 0.0;
                    let mut sbb = 0.0;
                    let mut sab = 0.0;
                    for (ti, &wi) in taps.iter().enumerate() {
                        for (tj, &wj) in taps.iter().enumerate() {
                            for (tk, &wk) in taps.iter().enumerate() {
                                let weight = wi * wj * wk;
                                let idx = (
                                    ci + ti - half,
                                    cj + tj - half,
                                    ck + tk - half,
                                );
                                let av = a[idx];
                                let bv = b[idx];
                                ma += weight * av;
                                mb += weight * bv;
                                saa += weight * av * av;
                                sbb += weight * bv * bv;
                                sab += weight * av * bv;
                            }
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn matches_definitional_oracle() {
        let opts = SsimOptions {
            window: 5,
            ..Default::default()
        };
        let a = random_volume((9, 8, 10), 0.0, 100.0, 1);
        let noise = random_volume((9, 8, 10), -5.0, 5.0, 2);
        let b = &a + &noise;
        let fast = ssim(&a, &b, &opts).unwrap();
        let slow = ssim_direct(&a, &b, &opts);
        assert!(
            (fast - slow).abs() < 1e-9,
            "separable {fast} vs direct {slow}"
        );
    }

    #[test]
    fn identical_volumes_score_one() {
        let a = random_volume((8, 8, 8), 0.0, 50.0, 3);
        let opts = SsimOptions {
            window: 5,
            ..Default::default()
        };
        let s = ssim(&a, &a, &opts).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisier_pairs_score_lower_and_order_is_symmetric() {
        let a = random_volume((10, 10, 10), 0.0, 100.0, 4);
        let small = &a + &random_volume((10, 10, 10), -2.0, 2.0, 5);
        let large = &a + &random_volume((10, 10, 10), -30.0, 30.0, 6);
        let opts = SsimOptions {
            window: 5,
            ..Default::default()
        };
        let s_small = ssim(&a, &small, &opts).unwrap();
        let s_large = ssim(&a, &large, &opts).unwrap();
        assert!(s_small > s_large);
        let s_rev = ssim(&small, &a, &opts).unwrap();
        assert!((s_small - s_rev).abs() < 1e-12);
    }

    #[test]
    fn window_must_fit() {
        let a = random_volume((6, 6, 6), 0.0, 1.0, 7);
        let opts = SsimOptions::default(); // window 11
        assert!(matches!(
            ssim(&a, &a, &opts).unwrap_err(),
            IguaneError::DegenerateInput(_)
        ));
    }

    #[test]
    fn fixed_dynamic_range_is_respected() {
        let a = random_volume((8, 8, 8), 0.0, 10.0, 8);
        let b = random_volume((8, 8, 8), 0.0, 10.0, 9);
        let o1 = SsimOptions {
            window: 5,
            dynamic_range: Some(10.0),
            ..Default::default()
        };
        let o2 = SsimOptions {
            window: 5,
            dynamic_range: Some(1000.0),
            ..Default::default()
        };
        // huge range -> constants dominate -> scores saturate toward 1
        let s1 = ssim(&a, &b, &o1).unwrap();
        let s2 = ssim(&a, &b, &o2).unwrap();
        assert!(s2 > s1);
    }
}
