//! Site-specific rendering of anatomy grids into raw-space volumes.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{label, Anatomy};
use crate::config::stream_rng;
use crate::error::{IguaneError, Result};
use crate::volume::{Space, Volume};

/// Mean raw intensity per tissue class (T1-like contrast).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TissueMeans {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
    pub hippocampus: f64,
}

impl TissueMeans {
    pub fn mean_for(&self, tissue: u8) -> f64 {
        match tissue {
            label::BACKGROUND => 0.0,
            label::CSF => self.csf,
            label::GM => self.gm,
            label::WM => self.wm,
            label::HIPPOCAMPUS => self.hippocampus,
            other => panic!("unknown tissue label {other}"),
        }
    }
}

/// One separable cosine mode of the multiplicative bias field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasMode {
    /// Signed amplitude; amplitudes of all modes sum to 1 in absolute value.
    pub amp: f64,
    /// Spatial frequency per axis (half-periods across the grid).
    pub freq: [f64; 3],
    /// Phase per axis (radians).
    pub phase: [f64; 3],
}

/// Scanner- and protocol-like intensity effect of one acquisition site.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteEffect {
    pub site_id: String,
    /// Contrast exponent applied to intensities normalized by the WM mean.
    pub gamma: f64,
    pub tissue_means: TissueMeans,
    /// Strength of the multiplicative bias field (0 disables it).
    pub bias_amplitude: f64,
    /// Standard deviation of additive Gaussian noise on brain voxels.
    pub noise_sigma: f64,
    pub bias_modes: [BiasMode; 3],
}

impl SiteEffect {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.gamma) {
            return Err(IguaneError::Validation(format!(
                "gamma {} outside [0.5, 2]",
                self.gamma
            )));
        }
        let m = &self.tissue_means;
        if !(m.csf > 0.0 && m.csf < m.gm && m.gm < m.wm) {
            return Err(IguaneError::Validation(
                "tissue means must satisfy 0 < CSF < GM < WM".into(),
            ));
        }
        if m.hippocampus <= 0.0 {
            return Err(IguaneError::Validation(
                "hippocampus mean must be positive".into(),
            ));
        }
        if self.bias_amplitude < 0.0 || self.bias_amplitude >= 1.0 {
            return Err(IguaneError::Validation(
                "bias_amplitude must be in [0, 1)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(IguaneError::Validation(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The do-nothing effect: canonical means, gamma 1, no bias, no noise.
    pub fn identity(site_id: &str) -> SiteEffect {
        SiteEffect {
            site_id: site_id.to_string(),
            gamma: 1.0,
            tissue_means: TissueMeans {
                csf: 150.0,
                gm: 480.0,
                wm: 750.0,
                hippocampus: 450.0,
            },
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            bias_modes: [BiasMode {
                amp: 1.0 / 3.0,
                freq: [1.0, 1.0, 1.0],
                phase: [0.0, 0.0, 0.0],
            }; 3],
        }
    }

    /// Draw a site's effect from its id and the cohort seed.
    pub fn from_seed(site_id: &str, seed: u64) -> SiteEffect {
        let mut rng = stream_rng(seed, &format!("site-effect/{site_id}"));
        let scale = 0.75 + rng.gen::<f64>() * 0.55; // overall intensity scale
        let csf = (110.0 + rng.gen::<f64>() * 80.0) * scale;
        let gm = (430.0 + rng.gen::<f64>() * 100.0) * scale;
        let wm = (660.0 + rng.gen::<f64>() * 160.0) * scale;
        let hippocampus = gm * (0.90 + rng.gen::<f64>() * 0.07);
        let gamma = 0.6 + rng.gen::<f64>() * 1.2;
        let bias_amplitude = 0.05 + rng.gen::<f64>() * 0.10;
        let noise_sigma = (8.0 + rng.gen::<f64>() * 12.0) * scale;
        let mut amps = [0.0f64; 3];
        for a in &mut amps {
            *a = 0.2 + rng.gen::<f64>() * 0.8;
        }
        let total: f64 = amps.iter().sum();
        let bias_modes = std::array::from_fn(|i| {
            let sign = if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
            BiasMode {
                amp: sign * amps[i] / total,
                freq: [
                    1.0 + (rng.gen::<f64>() * 2.0).floor(),
                    1.0 + (rng.gen::<f64>() * 2.0).floor(),
                    1.0 + (rng.gen::<f64>() * 2.0).floor(),
                ],
                phase: [
                    rng.gen::<f64>() * std::f64::consts::TAU,
                    rng.gen::<f64>() * std::f64::consts::TAU,
                    rng.gen::<f64>() * std::f64::consts::TAU,
                ],
            }
        });
        let effect = SiteEffect {
            site_id: site_id.to_string(),
            gamma,
            tissue_means: TissueMeans {
                csf,
                gm,
                wm,
                hippocampus,
            },
            bias_amplitude,
            noise_sigma,
            bias_modes,
        };
        effect
            .validate()
            .expect("seeded site effect ranges are valid by construction");
        effect
    }

    /// Multiplicative bias field value at a voxel (grid dims given in `n`).
    fn bias_at(&self, x: usize, y: usize, z: usize, n: [usize; 3]) -> f64 {
        if self.bias_amplitude == 0.0 {
            return 1.0;
        }
        let coords = [x as f64, y as f64, z as f64];
        let mut b = 0.0;
        for mode in &self.bias_modes {
            let mut v = mode.amp;
            for i in 0..3 {
                let t = std::f64::consts::PI * mode.freq[i] * (coords[i] + 0.5) / n[i] as f64;
                v *= (t + mode.phase[i]).cos();
            }
            b += v;
        }
        1.0 + self.bias_amplitude * b
    }
}

/// Render one anatomy at one site: tissue means, gamma contrast, smooth
/// multiplicative bias, additive Gaussian noise on brain voxels. Background
/// stays exactly zero. Deterministic in `(seed, site_id, subject_id)`.
pub fn render(anatomy: &Anatomy, effect: &SiteEffect, seed: u64) -> Result<Volume> {
    effect.validate()?;
    let mut rng = stream_rng(
        seed,
        &format!("render/{}/{}", effect.site_id, anatomy.subject_id),
    );
    let dims = anatomy.labels.dim();
    let n = [dims.0, dims.1, dims.2];
    let wm_mean = effect.tissue_means.wm;
    let mut data = Array3::<f64>::zeros(dims);
    let mut mask = Array3::<bool>::from_elem(dims, false);
    for x in 0..n[0] {
        for y in 0..n[1] {
            for z in 0..n[2] {
                let l = anatomy.labels[[x, y, z]];
                if l == label::BACKGROUND {
                    continue;
                }
                mask[[x, y, z]] = true;
                let base = effect.tissue_means.mean_for(l);
                // gamma contrast with the WM mean as the fixed point
                let mut v = wm_mean * (base / wm_mean).powf(effect.gamma);
                v *= effect.bias_at(x, y, z, n);
                if effect.noise_sigma > 0.0 {
                    let z_draw: f64 = rng.sample(StandardNormal);
                    v += z_draw * effect.noise_sigma;
                }
                data[[x, y, z]] = v;
            }
        }
    }
    Volume::new(data, mask, [1.0, 1.0, 1.0], Space::Raw)
}
