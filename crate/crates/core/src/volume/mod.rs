//! Volume data model and the intensity-space operations that bracket
//! every model call.
//!
//! A [`Volume`] moves through three intensity spaces:
//!
//! * `Raw` — as loaded from disk, arbitrary intensity scale.
//! * `Preprocessed` — background at 0, median brain intensity at 500.
//! * `ModelSpace` — background at -1, median brain intensity at 0.
//!
//! Conversions are exact affine maps; every operation validates the
//! space it expects and records the space it produces.

pub mod nifti;
pub mod tools;

pub use nifti::{load_volume, save_volume};

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};

/// Intensity space a volume currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Raw,
    Preprocessed,
    ModelSpace,
}

impl Space {
    /// Intensity assigned to non-mask voxels in this space.
    pub fn background_value(self) -> f64 {
        match self {
            Space::Raw | Space::Preprocessed => 0.0,
            Space::ModelSpace => -1.0,
        }
    }
}

/// 3D intensity grid plus brain mask and voxel-size metadata.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f64>,
    pub mask: Array3<bool>,
    /// Voxel edge lengths in mm.
    pub voxel_size: [f64; 3],
    pub space: Space,
}

impl Volume {
    /// Builds a volume, checking that data and mask dimensions agree.
    pub fn new(
        data: Array3<f64>,
        mask: Array3<bool>,
        voxel_size: [f64; 3],
        space: Space,
    ) -> Result<Self> {
        if data.dim() != mask.dim() {
            return Err(IguaneError::Validation(format!(
                "mask dims {:?} do not match image dims {:?}",
                mask.dim(),
                data.dim()
            )));
        }
        Ok(Volume {
            data,
            mask,
            voxel_size,
            space,
        })
    }

    /// Volume with an all-true mask (used when no mask sidecar exists).
    pub fn without_mask(data: Array3<f64>, voxel_size: [f64; 3], space: Space) -> Self {
        let mask = Array3::from_elem(data.dim(), true);
        Volume {
            data,
            mask,
            voxel_size,
            space,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let (x, y, z) = self.data.dim();
        [x, y, z]
    }

    /// Intensity assigned to non-mask voxels in the current space.
    pub fn background_value(&self) -> f64 {
        self.space.background_value()
    }

    /// Intensities of all mask voxels, in array iteration order.
    pub fn brain_values(&self) -> Vec<f64> {
        Zip::from(&self.data)
            .and(&self.mask)
            .fold(Vec::new(), |mut acc, &v, &m| {
                if m {
                    acc.push(v);
                }
                acc
            })
    }

    /// Median intensity over mask voxels.
    pub fn brain_median(&self) -> Result<f64> {
        let mut vals = self.brain_values();
        if vals.is_empty() {
            return Err(IguaneError::DegenerateInput(
                "mask contains no voxels".into(),
            ));
        }
        Ok(median_in_place(&mut vals))
    }

    fn expect_space(&self, space: Space, op: &str) -> Result<()> {
        if self.space != space {
            return Err(IguaneError::State(format!(
                "{op} requires a volume in {space:?} space, got {:?}",
                self.space
            )));
        }
        Ok(())
    }
}

/// Median of a mutable slice (average of the two middle order statistics
/// for even lengths). The slice is reordered.
pub fn median_in_place(vals: &mut [f64]) -> f64 {
    assert!(!vals.is_empty());
    let n = vals.len();
    let mid = n / 2;
    let (_, upper, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *upper;
    if n % 2 == 1 {
        hi
    } else {
        let (_, lower, _) = vals[..mid].select_nth_unstable_by(mid - 1, |a, b| a.total_cmp(b));
        (hi + *lower) / 2.0
    }
}

// ======================================================================
// Cropping
// ======================================================================

/// Removes background slices on the six volume faces until `target_dims`
/// is reached.
///
/// A slice is removable when all of its intensities are zero and its mask
/// is empty. When both faces of an axis have surplus background, slices
/// are taken from the face with more background first, alternating on
/// ties. Images without enough background slices are excluded.
pub fn crop_background(vol: &Volume, target_dims: [usize; 3]) -> Result<Volume> {
    if vol.space == Space::ModelSpace {
        return Err(IguaneError::State(
            "crop_background expects a raw or preprocessed volume".into(),
        ));
    }
    let dims = vol.dims();
    for axis in 0..3 {
        if target_dims[axis] > dims[axis] {
            return Err(IguaneError::Validation(format!(
                "target dims {:?} exceed volume dims {:?} on axis {axis}",
                target_dims, dims
            )));
        }
    }

    let mut lo_take = [0usize; 3];
    let mut hi_take = [0usize; 3];
    for axis in 0..3 {
        let need = dims[axis] - target_dims[axis];
        if need == 0 {
            continue;
        }
        let (lo_avail, hi_avail) = background_slices(vol, axis);
        if lo_avail + hi_avail < need {
            return Err(IguaneError::Exclusion(format!(
                "axis {axis}: {need} slices must be removed but only {} background slices exist",
                lo_avail + hi_avail
            )));
        }
        // Face with more background gives up slices first; ties alternate
        // starting from the low face.
        let mut lo_left = lo_avail;
        let mut hi_left = hi_avail;
        let mut low_turn = true;
        for _ in 0..need {
            let from_lo = if lo_left > hi_left {
                true
            } else if hi_left > lo_left {
                false
            } else {
                let t = low_turn;
                low_turn = !low_turn;
                t
            };
            if from_lo {
                lo_take[axis] += 1;
                lo_left -= 1;
            } else {
                hi_take[axis] += 1;
                hi_left -= 1;
            }
        }
    }

    let d = vol.data.slice(ndarray::s![
        lo_take[0]..dims[0] - hi_take[0],
        lo_take[1]..dims[1] - hi_take[1],
        lo_take[2]..dims[2] - hi_take[2]
    ]);
    let m = vol.mask.slice(ndarray::s![
        lo_take[0]..dims[0] - hi_take[0],
        lo_take[1]..dims[1] - hi_take[1],
        lo_take[2]..dims[2] - hi_take[2]
    ]);
    Volume::new(d.to_owned(), m.to_owned(), vol.voxel_size, vol.space)
}

/// Counts removable slices on the low and high faces of `axis`.
fn background_slices(vol: &Volume, axis: usize) -> (usize, usize) {
    let n = vol.dims()[axis];
    let is_empty = |idx: usize| -> bool {
        let d = vol.data.index_axis(ndarray::Axis(axis), idx);
        let m = vol.mask.index_axis(ndarray::Axis(axis), idx);
        d.iter().all(|&v| v == 0.0) && m.iter().all(|&b| !b)
    };
    let mut lo = 0;
    while lo < n && is_empty(lo) {
        lo += 1;
    }
    if lo == n {
        // Whole volume empty; treat everything as low-face background.
        return (n, 0);
    }
    let mut hi = 0;
    while hi < n - lo && is_empty(n - 1 - hi) {
        hi += 1;
    }
    (lo, hi)
}

// ======================================================================
// Intensity normalization and space conversions
// ======================================================================

/// Divides intensities by the median brain intensity and multiplies by
/// 500, so the brain median lands at 500 exactly; non-mask voxels are
/// set to 0.
pub fn median_normalize(vol: &Volume) -> Result<Volume> {
    let med = vol.brain_median()?;
    if med <= 0.0 {
        return Err(IguaneError::DegenerateInput(format!(
            "brain median must be positive, got {med}"
        )));
    }
    let mut data = vol.data.clone();
    Zip::from(&mut data).and(&vol.mask).for_each(|v, &m| {
        *v = if m { *v / med * 500.0 } else { 0.0 };
    });
    Ok(Volume {
        data,
        mask: vol.mask.clone(),
        voxel_size: vol.voxel_size,
        space: Space::Preprocessed,
    })
}

/// Preprocessed -> model space: data/500 - 1 (background -1, brain median 0).
pub fn to_model_space(vol: &Volume) -> Result<Volume> {
    vol.expect_space(Space::Preprocessed, "to_model_space")?;
    let data = vol.data.mapv(|v| v / 500.0 - 1.0);
    Ok(Volume {
        data,
        mask: vol.mask.clone(),
        voxel_size: vol.voxel_size,
        space: Space::ModelSpace,
    })
}

/// Model space -> preprocessed: (data + 1) * 500.
pub fn from_model_space(vol: &Volume) -> Result<Volume> {
    vol.expect_space(Space::ModelSpace, "from_model_space")?;
    let data = vol.data.mapv(|v| (v + 1.0) * 500.0);
    Ok(Volume {
        data,
        mask: vol.mask.clone(),
        voxel_size: vol.voxel_size,
        space: Space::Preprocessed,
    })
}

/// Sets non-mask voxels to the median of mask voxels (0 in model space),
/// giving the background a neutral value before any network forward pass.
pub fn neutralize_background(vol: &Volume) -> Result<Volume> {
    vol.expect_space(Space::ModelSpace, "neutralize_background")?;
    let med = vol.brain_median()?;
    let mut data = vol.data.clone();
    Zip::from(&mut data).and(&vol.mask).for_each(|v, &m| {
        if !m {
            *v = med;
        }
    });
    Ok(Volume {
        data,
        mask: vol.mask.clone(),
        voxel_size: vol.voxel_size,
        space: vol.space,
    })
}

/// Applies a brain mask: non-mask voxels take the background value of
/// the current space and the mask replaces the volume's mask.
pub fn apply_mask(vol: &Volume, mask: &Array3<bool>) -> Result<Volume> {
    if mask.dim() != vol.data.dim() {
        return Err(IguaneError::Validation(format!(
            "mask dims {:?} do not match volume dims {:?}",
            mask.dim(),
            vol.data.dim()
        )));
    }
    let bg = vol.background_value();
    let mut data = vol.data.clone();
    Zip::from(&mut data).and(mask).for_each(|v, &m| {
        if !m {
            *v = bg;
        }
    });
    Ok(Volume {
        data,
        mask: mask.clone(),
        voxel_size: vol.voxel_size,
        space: vol.space,
    })
}

// ======================================================================
// Padding for inference
// ======================================================================

/// Slices removed by [`unpad`] to invert a [`pad_to_multiple`] call.
#[derive(Debug, Clone, Copy)]
pub struct PadInfo {
    pub before: [usize; 3],
    pub after: [usize; 3],
}

impl PadInfo {
    pub fn is_identity(&self) -> bool {
        self.before == [0; 3] && self.after == [0; 3]
    }
}

/// Pads each axis up to the next multiple of `multiple` with background
/// voxels (mask false), splitting the padding evenly with the surplus on
/// the high face.
pub fn pad_to_multiple(vol: &Volume, multiple: usize) -> (Volume, PadInfo) {
    let dims = vol.dims();
    let mut before = [0usize; 3];
    let mut after = [0usize; 3];
    let mut new_dims = [0usize; 3];
    for axis in 0..3 {
        let rem = dims[axis] % multiple;
        let pad = if rem == 0 { 0 } else { multiple - rem };
        before[axis] = pad / 2;
        after[axis] = pad - pad / 2;
        new_dims[axis] = dims[axis] + pad;
    }
    let info = PadInfo { before, after };
    if info.is_identity() {
        return (vol.clone(), info);
    }
    let bg = vol.background_value();
    let mut data = Array3::from_elem((new_dims[0], new_dims[1], new_dims[2]), bg);
    let mut mask = Array3::from_elem((new_dims[0], new_dims[1], new_dims[2]), false);
    data.slice_mut(ndarray::s![
        before[0]..before[0] + dims[0],
        before[1]..before[1] + dims[1],
        before[2]..before[2] + dims[2]
    ])
    .assign(&vol.data);
    mask.slice_mut(ndarray::s![
        before[0]..before[0] + dims[0],
        before[1]..before[1] + dims[1],
        before[2]..before[2] + dims[2]
    ])
    .assign(&vol.mask);
    (
        Volume {
            data,
            mask,
            voxel_size: vol.voxel_size,
            space: vol.space,
        },
        info,
    )
}

/// Inverts [`pad_to_multiple`].
pub fn unpad(vol: &Volume, info: &PadInfo) -> Volume {
    if info.is_identity() {
        return vol.clone();
    }
    let dims = vol.dims();
    let d = vol.data.slice(ndarray::s![
        info.before[0]..dims[0] - info.after[0],
        info.before[1]..dims[1] - info.after[1],
        info.before[2]..dims[2] - info.after[2]
    ]);
    let m = vol.mask.slice(ndarray::s![
        info.before[0]..dims[0] - info.after[0],
        info.before[1]..dims[1] - info.after[1],
        info.before[2]..dims[2] - info.after[2]
    ]);
    Volume {
        data: d.to_owned(),
        mask: m.to_owned(),
        voxel_size: vol.voxel_size,
        space: vol.space,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    fn vol_from(data: Array3<f64>, mask: Array3<bool>, space: Space) -> Volume {
        Volume::new(data, mask, [1.0; 3], space).unwrap()
    }

    fn ball_volume(dims: [usize; 3], radius: f64) -> Volume {
        let c = [
            dims[0] as f64 / 2.0,
            dims[1] as f64 / 2.0,
            dims[2] as f64 / 2.0,
        ];
        let mut data = Array3::zeros((dims[0], dims[1], dims[2]));
        let mut mask = Array3::from_elem((dims[0], dims[1], dims[2]), false);
        for ((x, y, z), v) in data.indexed_iter_mut() {
            let dx = x as f64 + 0.5 - c[0];
            let dy = y as f64 + 0.5 - c[1];
            let dz = z as f64 + 0.5 - c[2];
            if (dx * dx + dy * dy + dz * dz).sqrt() < radius {
                *v = 1.0 + (x + 2 * y + 3 * z) as f64;
                mask[(x, y, z)] = true;
            }
        }
        vol_from(data, mask, Space::Raw)
    }

    #[test]
    fn median_normalize_direct_formula() {
        // mask intensities {2,4,6}, median 4 -> {250,500,750}
        let data = ndarray::arr3(&[[[2.0, 4.0, 6.0], [9.0, 9.0, 9.0]]]);
        let mask = ndarray::arr3(&[[[true, true, true], [false, false, false]]]);
        let v = median_normalize(&vol_from(data, mask, Space::Raw)).unwrap();
        assert_relative_eq!(v.data[(0, 0, 0)], 250.0);
        assert_relative_eq!(v.data[(0, 0, 1)], 500.0);
        assert_relative_eq!(v.data[(0, 0, 2)], 750.0);
        // background forced to zero
        assert_eq!(v.data[(0, 1, 0)], 0.0);
        assert_eq!(v.space, Space::Preprocessed);
    }

    #[test]
    fn median_normalize_constant_brain() {
        let data = Array3::from_elem((2, 2, 2), 7.5);
        let mask = Array3::from_elem((2, 2, 2), true);
        let v = median_normalize(&vol_from(data, mask, Space::Raw)).unwrap();
        assert!(v.data.iter().all(|&x| (x - 500.0).abs() < 1e-12));
    }

    #[test]
    fn median_normalize_zero_median_rejected() {
        let data = Array3::zeros((2, 2, 2));
        let mask = Array3::from_elem((2, 2, 2), true);
        let err = median_normalize(&vol_from(data, mask, Space::Raw)).unwrap_err();
        assert!(matches!(err, IguaneError::DegenerateInput(_)));
    }

    #[test]
    fn model_space_round_trip() {
        let v = ball_volume([12, 10, 8], 4.0);
        let p = median_normalize(&v).unwrap();
        let m = to_model_space(&p).unwrap();
        // brain median 500 -> 0; background 0 -> -1
        assert_relative_eq!(m.brain_median().unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(m.data[(0, 0, 0)], -1.0);
        let back = from_model_space(&m).unwrap();
        for (a, b) in back.data.iter().zip(p.data.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn to_model_space_requires_preprocessed() {
        let v = ball_volume([8, 8, 8], 3.0);
        assert!(matches!(
            to_model_space(&v).unwrap_err(),
            IguaneError::State(_)
        ));
    }

    #[test]
    fn neutralize_background_sets_brain_median_and_is_idempotent() {
        let v = ball_volume([12, 12, 12], 4.0);
        let m = to_model_space(&median_normalize(&v).unwrap()).unwrap();
        let n1 = neutralize_background(&m).unwrap();
        let med = m.brain_median().unwrap();
        Zip::from(&n1.data).and(&n1.mask).for_each(|&v, &msk| {
            if !msk {
                assert_relative_eq!(v, med, epsilon = 1e-12);
            }
        });
        // mask voxels untouched
        Zip::from(&n1.data)
            .and(&m.data)
            .and(&m.mask)
            .for_each(|&a, &b, &msk| {
                if msk {
                    assert_eq!(a, b);
                }
            });
        let n2 = neutralize_background(&n1).unwrap();
        assert_eq!(n1.data, n2.data);
    }

    #[test]
    fn apply_mask_cases() {
        let v = ball_volume([8, 8, 8], 3.0);
        let p = median_normalize(&v).unwrap();
        let m = to_model_space(&p).unwrap();

        let all_true = Array3::from_elem(m.data.dim(), true);
        let same = apply_mask(&m, &all_true).unwrap();
        assert_eq!(same.data, m.data);

        let all_false = Array3::from_elem(m.data.dim(), false);
        let bg = apply_mask(&m, &all_false).unwrap();
        assert!(bg.data.iter().all(|&x| x == -1.0));

        let mixed = m.mask.clone();
        let masked = apply_mask(&m, &mixed).unwrap();
        Zip::from(&masked.data)
            .and(&m.data)
            .and(&mixed)
            .for_each(|&a, &b, &keep| {
                if keep {
                    assert_eq!(a, b);
                } else {
                    assert_eq!(a, -1.0);
                }
            });

        let bad = Array3::from_elem((2, 2, 2), true);
        assert!(matches!(
            apply_mask(&m, &bad).unwrap_err(),
            IguaneError::Validation(_)
        ));
    }

    #[test]
    fn crop_reaches_target_and_preserves_anatomy() {
        // 18x20x18 ball of radius 4 has plenty of empty slices.
        let v = ball_volume([18, 20, 18], 4.0);
        let before_brain: usize = v.mask.iter().filter(|&&m| m).count();
        let c = crop_background(&v, [12, 14, 12]).unwrap();
        assert_eq!(c.dims(), [12, 14, 12]);
        let after_brain: usize = c.mask.iter().filter(|&&m| m).count();
        assert_eq!(before_brain, after_brain);
    }

    #[test]
    fn crop_identity_when_already_at_target() {
        let v = ball_volume([10, 10, 10], 4.0);
        let c = crop_background(&v, [10, 10, 10]).unwrap();
        assert_eq!(c.data, v.data);
    }

    #[test]
    fn crop_excludes_when_brain_touches_faces() {
        let data = Array3::from_elem((6, 6, 6), 1.0);
        let mask = Array3::from_elem((6, 6, 6), true);
        let v = vol_from(data, mask, Space::Raw);
        assert!(matches!(
            crop_background(&v, [4, 4, 4]).unwrap_err(),
            IguaneError::Exclusion(_)
        ));
    }

    #[test]
    fn crop_takes_from_larger_face_first() {
        // 1D-ish layout along axis 0: 3 empty slices low, 1 empty high.
        let mut data = Array3::zeros((10, 4, 4));
        let mut mask = Array3::from_elem((10, 4, 4), false);
        for x in 3..9 {
            data[(x, 2, 2)] = 1.0;
            mask[(x, 2, 2)] = true;
        }
        let v = vol_from(data, mask, Space::Raw);
        // need=2: both come from the low face (3 > 1 background slices).
        let c = crop_background(&v, [8, 4, 4]).unwrap();
        assert_eq!(c.dims()[0], 8);
        assert_eq!(c.data[(1, 2, 2)], 1.0); // old x=3 now at x=1
    }

    #[test]
    fn pad_unpad_round_trip() {
        let v = ball_volume([10, 12, 14], 4.0);
        let p = median_normalize(&v).unwrap();
        let m = to_model_space(&p).unwrap();
        let (padded, info) = pad_to_multiple(&m, 16);
        assert_eq!(padded.dims(), [16, 16, 16]);
        assert_eq!(padded.data[(0, 0, 0)], -1.0);
        let back = unpad(&padded, &info);
        assert_eq!(back.data, m.data);
        assert_eq!(back.mask, m.mask);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_in_place(&mut [5.0]), 5.0);
    }
}
