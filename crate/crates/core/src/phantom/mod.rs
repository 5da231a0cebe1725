//! Synthetic multi-site volumetric data with known ground truth.
//!
//! Subjects are concentric-ellipsoid head phantoms: a CSF rim, a gray-matter
//! shell, a white-matter core, central CSF ventricles, and two hippocampal
//! ellipsoids. The gray-matter fraction of the brain follows an affine law in
//! age with bounded noise, and AD subjects carry a fixed hippocampal volume
//! reduction, so downstream statistics have closed-form targets. Site effects
//! (contrast, bias fields, noise) are layered on top at render time.

pub mod cohort;
pub mod render;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::stream_rng;
use crate::error::{IguaneError, Result};
use crate::manifest::Sex;

/// Tissue labels used in anatomy grids.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const CSF: u8 = 1;
    pub const GM: u8 = 2;
    pub const WM: u8 = 3;
    pub const HIPPOCAMPUS: u8 = 4;
}

/// Clinical status of a phantom subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
}

impl Diagnosis {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Result<Diagnosis> {
        match s {
            "CN" => Ok(Diagnosis::Cn),
            "AD" => Ok(Diagnosis::Ad),
            other => Err(IguaneError::Validation(format!(
                "unknown diagnosis {other:?} (expected CN or AD)"
            ))),
        }
    }
}

/// Geometry and intensity-free anatomy parameters.
///
/// All spatial quantities are fractions of the grid or of the brain
/// semi-axes, so the same parameters scale from desk-size grids to full
/// resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnatomyParams {
    /// Grid dimensions (x, y, z).
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    /// Intercept `a` of the gray-matter law `gm_frac = a - b * age + eps`.
    #[serde(default = "default_gm_intercept")]
    pub gm_intercept: f64,
    /// Slope `b` (per year) of the gray-matter law.
    #[serde(default = "default_gm_age_slope")]
    pub gm_age_slope: f64,
    /// Standard deviation of the bounded noise `eps`.
    #[serde(default = "default_gm_noise_sigma")]
    pub gm_noise_sigma: f64,
    /// Hard bound on `|eps|`.
    #[serde(default = "default_gm_noise_clamp")]
    pub gm_noise_clamp: f64,
    /// Brain semi-axes as fractions of the grid dimensions.
    #[serde(default = "default_brain_semi_frac")]
    pub brain_semi_frac: [f64; 3],
    /// Log-scale sigma of the per-axis brain shape jitter.
    #[serde(default = "default_shape_jitter_sigma")]
    pub shape_jitter_sigma: f64,
    /// Multiplicative brain size factor for male subjects.
    #[serde(default = "default_male_scale")]
    pub male_scale: f64,
    /// Normalized radius where the outer CSF rim starts.
    #[serde(default = "default_csf_inner")]
    pub csf_inner: f64,
    /// Ventricle semi-axes as a fraction of the brain semi-axes.
    #[serde(default = "default_ventricle_frac")]
    pub ventricle_frac: f64,
    /// Hippocampus center offsets as fractions of the brain semi-axes; the
    /// x offset is mirrored for the second hippocampus.
    #[serde(default = "default_hippo_center_frac")]
    pub hippo_center_frac: [f64; 3],
    /// Hippocampus semi-axes as fractions of the brain semi-axes.
    #[serde(default = "default_hippo_semi_frac")]
    pub hippo_semi_frac: [f64; 3],
    /// Fractional hippocampal volume loss across the full age range.
    #[serde(default = "default_hippo_age_slope")]
    pub hippo_age_slope: f64,
    /// Log-scale sigma of the per-subject hippocampal volume jitter.
    #[serde(default = "default_hippo_jitter_sigma")]
    pub hippo_jitter_sigma: f64,
    /// Hippocampal volume factor for AD subjects (the atrophy ratio rho).
    #[serde(default = "default_ad_hippo_factor")]
    pub ad_hippo_factor: f64,
}

fn default_dims() -> [usize; 3] {
    [32, 40, 32]
}
fn default_gm_intercept() -> f64 {
    0.42
}
fn default_gm_age_slope() -> f64 {
    0.0025
}
fn default_gm_noise_sigma() -> f64 {
    0.01
}
fn default_gm_noise_clamp() -> f64 {
    0.03
}
fn default_brain_semi_frac() -> [f64; 3] {
    [0.42, 0.44, 0.42]
}
fn default_shape_jitter_sigma() -> f64 {
    0.03
}
fn default_male_scale() -> f64 {
    1.03
}
fn default_csf_inner() -> f64 {
    0.94
}
fn default_ventricle_frac() -> f64 {
    0.16
}
fn default_hippo_center_frac() -> [f64; 3] {
    [0.35, -0.12, -0.08]
}
fn default_hippo_semi_frac() -> [f64; 3] {
    [0.20, 0.13, 0.16]
}
fn default_hippo_age_slope() -> f64 {
    0.30
}
fn default_hippo_jitter_sigma() -> f64 {
    0.10
}
fn default_ad_hippo_factor() -> f64 {
    0.8
}

impl Default for AnatomyParams {
    fn default() -> Self {
        AnatomyParams {
            dims: default_dims(),
            gm_intercept: default_gm_intercept(),
            gm_age_slope: default_gm_age_slope(),
            gm_noise_sigma: default_gm_noise_sigma(),
            gm_noise_clamp: default_gm_noise_clamp(),
            brain_semi_frac: default_brain_semi_frac(),
            shape_jitter_sigma: default_shape_jitter_sigma(),
            male_scale: default_male_scale(),
            csf_inner: default_csf_inner(),
            ventricle_frac: default_ventricle_frac(),
            hippo_center_frac: default_hippo_center_frac(),
            hippo_semi_frac: default_hippo_semi_frac(),
            hippo_age_slope: default_hippo_age_slope(),
            hippo_jitter_sigma: default_hippo_jitter_sigma(),
            ad_hippo_factor: default_ad_hippo_factor(),
        }
    }
}

impl AnatomyParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(IguaneError::Validation(
                "anatomy dims must be at least 8 voxels per axis".into(),
            ));
        }
        if !(self.gm_age_slope > 0.0) {
            return Err(IguaneError::Validation(
                "gm_age_slope must be positive (gray matter decreases with age)".into(),
            ));
        }
        if self.gm_noise_sigma < 0.0 || self.gm_noise_clamp < 0.0 {
            return Err(IguaneError::Validation(
                "gray-matter noise parameters must be non-negative".into(),
            ));
        }
        if self.brain_semi_frac.iter().any(|&f| !(0.0 < f && f < 0.5)) {
            return Err(IguaneError::Validation(
                "brain_semi_frac entries must be in (0, 0.5)".into(),
            ));
        }
        if !(0.0 < self.csf_inner && self.csf_inner < 1.0) {
            return Err(IguaneError::Validation(
                "csf_inner must be in (0, 1)".into(),
            ));
        }
        if !(0.0 < self.ad_hippo_factor && self.ad_hippo_factor <= 1.0) {
            return Err(IguaneError::Validation(
                "ad_hippo_factor must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Ground-truth tissue grid for one subject.
#[derive(Debug, Clone)]
pub struct Anatomy {
    pub labels: Array3<u8>,
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub diagnosis: Diagnosis,
    /// Gray-matter fraction the affine law asked for.
    pub gm_frac_target: f64,
    /// Gray-matter fraction realized on the grid.
    pub gm_frac: f64,
    pub brain_voxels: usize,
    pub hippocampus_voxels: usize,
    /// Continuous-model hippocampal volume (both sides, diagnosis factor
    /// included), before voxelization.
    pub hippocampus_model_volume: f64,
}

impl Anatomy {
    /// Brain mask (every non-background voxel).
    pub fn brain_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l != label::BACKGROUND)
    }
}

fn clamped_normal<R: Rng>(rng: &mut R, sigma: f64, clamp: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (z * sigma).clamp(-clamp, clamp)
}

/// Generate one subject's tissue grid.
///
/// Deterministic in `(seed, subject_id)`: the RNG stream is derived from
/// both, so the same subject can be regenerated independently of generation
/// order. Age must lie in the study range [18, 80].
pub fn generate_anatomy(
    age: f64,
    diagnosis: Diagnosis,
    sex: Sex,
    subject_id: &str,
    seed: u64,
    params: &AnatomyParams,
) -> Result<Anatomy> {
    params.validate()?;
    if !(18.0..=80.0).contains(&age) {
        return Err(IguaneError::Validation(format!(
            "age {age} outside the study range [18, 80]"
        )));
    }
    let mut rng = stream_rng(seed, &format!("anatomy/{subject_id}"));

    // Fixed draw order so that, for a given (seed, subject_id), changing only
    // age or diagnosis keeps every random term identical.
    let shape_jitter: [f64; 3] = [
        clamped_normal(&mut rng, params.shape_jitter_sigma, 3.0 * params.shape_jitter_sigma).exp(),
        clamped_normal(&mut rng, params.shape_jitter_sigma, 3.0 * params.shape_jitter_sigma).exp(),
        clamped_normal(&mut rng, params.shape_jitter_sigma, 3.0 * params.shape_jitter_sigma).exp(),
    ];
    let gm_eps = clamped_normal(&mut rng, params.gm_noise_sigma, params.gm_noise_clamp);
    let hippo_jitter = clamped_normal(
        &mut rng,
        params.hippo_jitter_sigma,
        3.0 * params.hippo_jitter_sigma,
    )
    .exp();
    // Subvoxel position jitter decouples the hippocampi from the voxel
    // lattice, so digitized voxel counts are unbiased for the continuous
    // ellipsoid volume instead of tracking lattice-alignment artifacts.
    let hippo_shift: [f64; 3] = std::array::from_fn(|_| rng.gen::<f64>() - 0.5);

    let sex_scale = match sex {
        Sex::M => params.male_scale,
        Sex::F => 1.0,
    };
    let [nx, ny, nz] = params.dims;
    let center = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let semi: [f64; 3] = std::array::from_fn(|i| {
        params.brain_semi_frac[i] * params.dims[i] as f64 * sex_scale * shape_jitter[i]
    });

    // Hippocampal size: age shrinkage and subject jitter act on volume, so
    // the semi-axes carry the cube root.
    let age_u = (age - 18.0) / 62.0;
    let hippo_volume_factor = (1.0 - params.hippo_age_slope * age_u) * hippo_jitter;
    if hippo_volume_factor <= 0.0 {
        return Err(IguaneError::Validation(
            "hippo_age_slope too steep: non-positive hippocampal volume".into(),
        ));
    }
    let hippo_scale = hippo_volume_factor.cbrt();
    let hippo_semi: [f64; 3] = std::array::from_fn(|i| semi[i] * params.hippo_semi_frac[i] * hippo_scale);
    // Two hippocampi, mirrored in x.
    let hippo_centers: [[f64; 3]; 2] = [
        std::array::from_fn(|i| center[i] + params.hippo_center_frac[i] * semi[i] + hippo_shift[i]),
        std::array::from_fn(|i| {
            let sign = if i == 0 { -1.0 } else { 1.0 };
            center[i] + sign * params.hippo_center_frac[i] * semi[i] + hippo_shift[i]
        }),
    ];

    // Continuous-model hippocampal volume (both ellipsoids).
    let mut hippo_model_volume =
        2.0 * (4.0 / 3.0) * std::f64::consts::PI * hippo_semi[0] * hippo_semi[1] * hippo_semi[2];
    if diagnosis == Diagnosis::Ad {
        hippo_model_volume *= params.ad_hippo_factor;
    }

    // Classify voxels. `splittable` holds the voxels later divided into GM
    // and WM by normalized-radius rank.
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    let mut brain_voxels = 0usize;
    let mut splittable: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut hippo_candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                let rho = ((p[0] - center[0]) / semi[0]).powi(2)
                    + ((p[1] - center[1]) / semi[1]).powi(2)
                    + ((p[2] - center[2]) / semi[2]).powi(2);
                let rho = rho.sqrt();
                if rho > 1.0 {
                    continue; // background
                }
                brain_voxels += 1;
                let mut hippo_rho = f64::INFINITY;
                for c in &hippo_centers {
                    let hr = ((p[0] - c[0]) / hippo_semi[0]).powi(2)
                        + ((p[1] - c[1]) / hippo_semi[1]).powi(2)
                        + ((p[2] - c[2]) / hippo_semi[2]).powi(2);
                    hippo_rho = hippo_rho.min(hr.sqrt());
                }
                if hippo_rho <= 1.0 {
                    hippo_candidates.push((hippo_rho, x, y, z));
                    continue;
                }
                if rho <= params.ventricle_frac || rho > params.csf_inner {
                    labels[[x, y, z]] = label::CSF;
                } else {
                    splittable.push((rho, x, y, z));
                }
            }
        }
    }
    if brain_voxels == 0 || splittable.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "anatomy grid too small: no brain voxels to assign".into(),
        ));
    }

    // AD keeps the innermost fraction of the hippocampal voxels, making the
    // voxel-count ratio to the CN template exact up to rounding. Trimmed
    // voxels fall back into the GM/WM pool.
    hippo_candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let hippo_keep = match diagnosis {
        Diagnosis::Cn => hippo_candidates.len(),
        Diagnosis::Ad => {
            (params.ad_hippo_factor * hippo_candidates.len() as f64).round() as usize
        }
    };
    for &(_, x, y, z) in &hippo_candidates[..hippo_keep] {
        labels[[x, y, z]] = label::HIPPOCAMPUS;
    }
    for &(_, x, y, z) in &hippo_candidates[hippo_keep..] {
        let p = [x as f64, y as f64, z as f64];
        let rho = (((p[0] - center[0]) / semi[0]).powi(2)
            + ((p[1] - center[1]) / semi[1]).powi(2)
            + ((p[2] - center[2]) / semi[2]).powi(2))
        .sqrt();
        splittable.push((rho, x, y, z));
    }

    // Split the remaining shell into GM (outer) and WM (inner) by rank so
    // the achieved gray-matter count hits the affine-law target to within
    // one voxel.
    splittable.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let gm_target = params.gm_intercept - params.gm_age_slope * age + gm_eps;
    let gm_frac_target = gm_target.clamp(0.0, 1.0);
    let desired_gm = (gm_frac_target * brain_voxels as f64).round() as usize;
    let n_split = splittable.len();
    let gm_count = desired_gm.min(n_split);
    let wm_count = n_split - gm_count;
    for &(_, x, y, z) in &splittable[..wm_count] {
        labels[[x, y, z]] = label::WM;
    }
    for &(_, x, y, z) in &splittable[wm_count..] {
        labels[[x, y, z]] = label::GM;
    }

    let gm_frac = gm_count as f64 / brain_voxels as f64;
    Ok(Anatomy {
        labels,
        subject_id: subject_id.to_string(),
        age,
        sex,
        diagnosis,
        gm_frac_target,
        gm_frac,
        brain_voxels,
        hippocampus_voxels: hippo_keep,
        hippocampus_model_volume: hippo_model_volume,
    })
}
