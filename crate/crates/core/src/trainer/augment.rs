//! Training-time data augmentation: random integer translation plus an
//! occasional small rotation about one of the three grid axes.
//!
//! The draw itself ([`draw_augment`]) is split from the deterministic
//! application ([`apply_augment`]) so tests can exercise exact geometric
//! cases, and so the trainer's RNG consumption stays easy to audit: every
//! call draws the three translation components, then one uniform for the
//! rotation coin, then (only if the coin lands) the plane and angle.
//!
//! Conventions:
//! - translation by `t` moves content *forward*: `out[p + t] = in[p]`;
//! - rotation happens first, about the grid center `(n-1)/2` of the two
//!   in-plane axes, with trilinear interpolation for intensities and
//!   nearest-neighbor for the mask;
//! - voxels whose source falls outside the grid take the background
//!   intensity of the volume's space (mask: `false`).

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Translations are drawn uniformly from `-max..=max` voxels per axis.
    #[serde(default = "default_max_translation")]
    pub max_translation: i64,
    /// Rotation angle drawn uniformly from `-max..=max` degrees.
    #[serde(default = "default_max_rotation_deg")]
    pub max_rotation_deg: f64,
    /// Probability that a rotation is applied at all.
    #[serde(default = "default_rotation_prob")]
    pub rotation_prob: f64,
}

fn default_max_translation() -> i64 {
    5
}
fn default_max_rotation_deg() -> f64 {
    10.0
}
fn default_rotation_prob() -> f64 {
    0.5
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            max_translation: default_max_translation(),
            max_rotation_deg: default_max_rotation_deg(),
            rotation_prob: default_rotation_prob(),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_translation < 0 {
            return Err(IguaneError::Config(format!(
                "max_translation must be >= 0, got {}",
                self.max_translation
            )));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(IguaneError::Config(format!(
                "max_rotation_deg must be in [0, 180], got {}",
                self.max_rotation_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.rotation_prob) {
            return Err(IguaneError::Config(format!(
                "rotation_prob must be in [0, 1], got {}",
                self.rotation_prob
            )));
        }
        Ok(())
    }
}

/// The plane a rotation acts in (equivalently, the grid axis it spins
/// around: `Xy` rotates about the z axis, and so on).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationPlane {
    Xy,
    Xz,
    Yz,
}

impl RotationPlane {
    /// Indices of the two rotated axes.
    fn axes(self) -> (usize, usize) {
        match self {
            RotationPlane::Xy => (0, 1),
            RotationPlane::Xz => (0, 2),
            RotationPlane::Yz => (1, 2),
        }
    }
}

/// One concrete augmentation: apply the rotation (if any), then the
/// integer translation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub translation: [i64; 3],
    pub rotation: Option<(RotationPlane, f64)>,
}

impl AugmentDraw {
    pub fn identity() -> AugmentDraw {
        AugmentDraw {
            translation: [0, 0, 0],
            rotation: None,
        }
    }
}

/// Draws a random augmentation. RNG consumption order is fixed: three
/// translation components, one uniform for the rotation coin, then plane
/// and angle only when the coin succeeds.
pub fn draw_augment<R: Rng>(params: &AugmentParams, rng: &mut R) -> Result<AugmentDraw> {
    params.validate()?;
    let m = params.max_translation;
    let translation = [
        rng.gen_range(-m..=m),
        rng.gen_range(-m..=m),
        rng.gen_range(-m..=m),
    ];
    let coin: f64 = rng.gen();
    let rotation = if coin < params.rotation_prob && params.max_rotation_deg > 0.0 {
        let plane = match rng.gen_range(0..3u8) {
            0 => RotationPlane::Xy,
            1 => RotationPlane::Xz,
            _ => RotationPlane::Yz,
        };
        let d = params.max_rotation_deg;
        let angle = rng.gen_range(-d..=d);
        Some((plane, angle))
    } else {
        None
    };
    Ok(AugmentDraw {
        translation,
        rotation,
    })
}

/// Applies a concrete augmentation to a volume. Intensities are resampled
/// with trilinear interpolation under rotation and copied exactly under
/// pure translation; the mask always moves with nearest-neighbor lookups.
pub fn apply_augment(vol: &Volume, draw: &AugmentDraw) -> Result<Volume> {
    let mut out = vol.clone();
    if let Some((plane, degrees)) = draw.rotation {
        out = rotate(&out, plane, degrees);
    }
    if draw.translation != [0, 0, 0] {
        out = translate(&out, draw.translation);
    }
    Ok(out)
}

/// Draws and applies an augmentation in one call.
pub fn augment<R: Rng>(vol: &Volume, params: &AugmentParams, rng: &mut R) -> Result<Volume> {
    let draw = draw_augment(params, rng)?;
    apply_augment(vol, &draw)
}

fn translate(vol: &Volume, t: [i64; 3]) -> Volume {
    let (nx, ny, nz) = vol.data.dim();
    let bg = vol.background_value();
    let mut data = Array3::from_elem((nx, ny, nz), bg);
    let mut mask = Array3::from_elem((nx, ny, nz), false);
    for x in 0..nx {
        let sx = x as i64 - t[0];
        if sx < 0 || sx >= nx as i64 {
            continue;
        }
        for y in 0..ny {
            let sy = y as i64 - t[1];
            if sy < 0 || sy >= ny as i64 {
                continue;
            }
            for z in 0..nz {
                let sz = z as i64 - t[2];
                if sz < 0 || sz >= nz as i64 {
                    continue;
                }
                let s = (sx as usize, sy as usize, sz as usize);
                data[(x, y, z)] = vol.data[s];
                mask[(x, y, z)] = vol.mask[s];
            }
        }
    }
    Volume {
        data,
        mask,
        voxel_size: vol.voxel_size,
        space: vol.space,
    }
}

fn rotate(vol: &Volume, plane: RotationPlane, degrees: f64) -> Volume {
    let dims = vol.dims();
    let (ax_a, ax_b) = plane.axes();
    let ca = (dims[ax_a] as f64 - 1.0) / 2.0;
    let cb = (dims[ax_b] as f64 - 1.0) / 2.0;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let bg = vol.background_value();
    let (nx, ny, nz) = vol.data.dim();
    let mut data = Array3::from_elem((nx, ny, nz), bg);
    let mut mask = Array3::from_elem((nx, ny, nz), false);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                // Inverse rotation: where did this output voxel come from?
                let da = p[ax_a] - ca;
                let db = p[ax_b] - cb;
                let mut q = p;
                q[ax_a] = ca + cos * da + sin * db;
                q[ax_b] = cb - sin * da + cos * db;
                data[(x, y, z)] = sample_trilinear(&vol.data, q, bg);
                mask[(x, y, z)] = sample_nearest_mask(&vol.mask, q);
            }
        }
    }
    Volume {
        data,
        mask,
        voxel_size: vol.voxel_size,
        space: vol.space,
    }
}

fn sample_trilinear(data: &Array3<f64>, q: [f64; 3], fill: f64) -> f64 {
    let dims = data.dim();
    let n = [dims.0 as i64, dims.1 as i64, dims.2 as i64];
    let base = [q[0].floor(), q[1].floor(), q[2].floor()];
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8u8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for d in 0..3 {
            let hi = (corner >> d) & 1 == 1;
            idx[d] = base[d] as i64 + if hi { 1 } else { 0 };
            w *= if hi { frac[d] } else { 1.0 - frac[d] };
        }
        if w == 0.0 {
            continue;
        }
        let v = if (0..3).all(|d| idx[d] >= 0 && idx[d] < n[d]) {
            data[(idx[0] as usize, idx[1] as usize, idx[2] as usize)]
        } else {
            fill
        };
        acc += w * v;
    }
    acc
}

fn sample_nearest_mask(mask: &Array3<bool>, q: [f64; 3]) -> bool {
    let dims = mask.dim();
    let n = [dims.0 as i64, dims.1 as i64, dims.2 as i64];
    let mut idx = [0i64; 3];
    for d in 0..3 {
        idx[d] = q[d].round() as i64;
        if idx[d] < 0 || idx[d] >= n[d] {
            return false;
        }
    }
    mask[(idx[0] as usize, idx[1] as usize, idx[2] as usize)]
}
