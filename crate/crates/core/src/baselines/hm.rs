//! Histogram matching: learn a standard intensity scale from reference
//! images, then map each volume's brain-intensity landmarks onto it with
//! a monotone piecewise-linear transform.

use std::path::Path;

use ndarray::Zip;

use crate::error::{IguaneError, Result};
use crate::stats::percentile;
use crate::volume::{Space, Volume};

/// Landmark percentiles of the standard scale: p1, the deciles p10..p90,
/// and p99.
pub const LANDMARK_PERCENTILES: [f64; 11] = [
    1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0,
];

/// The learned standard scale: target intensities for each landmark
/// percentile, averaged over the reference images.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardScale {
    pub percentiles: Vec<f64>,
    pub targets: Vec<f64>,
}

impl StandardScale {
    /// Validates the pairing and the strict monotonicity of the targets.
    pub fn new(percentiles: Vec<f64>, targets: Vec<f64>) -> Result<StandardScale> {
        if percentiles.len() != targets.len() || percentiles.len() < 2 {
            return Err(IguaneError::Validation(format!(
                "a standard scale needs matched percentile/target lists of length >= 2, \
                 got {} and {}",
                percentiles.len(),
                targets.len()
            )));
        }
        if percentiles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IguaneError::Validation(
                "standard-scale percentiles must be strictly increasing".into(),
            ));
        }
        if targets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IguaneError::DegenerateInput(
                "standard-scale target intensities must be strictly increasing".into(),
            ));
        }
        Ok(StandardScale {
            percentiles,
            targets,
        })
    }

    /// Writes the scale as `percentile,target` CSV rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            IguaneError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e),
            }
        })?;
        w.write_record(["percentile", "target"])
            .map_err(|e| IguaneError::Validation(format!("csv write: {e}")))?;
        for (p, t) in self.percentiles.iter().zip(&self.targets) {
            w.write_record([p.to_string(), t.to_string()])
                .map_err(|e| IguaneError::Validation(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| IguaneError::io(path, e))?;
        Ok(())
    }

    /// Reads a scale written by [`Self::save_csv`].
    pub fn load_csv(path: &Path) -> Result<StandardScale> {
        let mut r = csv::Reader::from_path(path).map_err(|e| IguaneError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        let mut percentiles = Vec::new();
        let mut targets = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| IguaneError::Validation(format!("csv read: {e}")))?;
            if rec.len() != 2 {
                return Err(IguaneError::Validation(format!(
                    "standard-scale rows need 2 fields, got {}",
                    rec.len()
                )));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    IguaneError::Validation(format!("bad number `{s}` in standard scale: {e}"))
                })
            };
            percentiles.push(parse(&rec[0])?);
            targets.push(parse(&rec[1])?);
        }
        StandardScale::new(percentiles, targets)
    }
}

fn brain_landmarks(vol: &Volume, percentiles: &[f64]) -> Result<Vec<f64>> {
    let vals = vol.brain_values();
    if vals.is_empty() {
        return Err(IguaneError::DegenerateInput(
            "volume mask contains no voxels".into(),
        ));
    }
    percentiles.iter().map(|&q| percentile(&vals, q)).collect()
}

/// Learns the standard scale by averaging the brain-voxel landmark
/// percentiles of the reference volumes.
pub fn learn_standard_scale(references: &[Volume]) -> Result<StandardScale> {
    if references.is_empty() {
        return Err(IguaneError::Validation(
            "learning a standard scale needs at least one reference volume".into(),
        ));
    }
    let percentiles = LANDMARK_PERCENTILES.to_vec();
    let mut sums = vec![0.0; percentiles.len()];
    for vol in references {
        vol_expect_preprocessed(vol, "learn_standard_scale")?;
        let lm = brain_landmarks(vol, &percentiles)?;
        for (s, v) in sums.iter_mut().zip(&lm) {
            *s += v;
        }
    }
    let n = references.len() as f64;
    let targets: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    StandardScale::new(percentiles, targets)
}

fn vol_expect_preprocessed(vol: &Volume, op: &str) -> Result<()> {
    if vol.space != Space::Preprocessed {
        return Err(IguaneError::State(format!(
            "{op} expects a Preprocessed volume, got {:?}",
            vol.space
        )));
    }
    Ok(())
}

/// Maps brain intensities through the monotone piecewise-linear transform
/// sending this volume's landmarks onto the standard scale. The boundary
/// segments extend linearly beyond the outermost landmarks, so the map is
/// strictly increasing everywhere. Background voxels stay at 0.
pub fn histogram_match(vol: &Volume, scale: &StandardScale) -> Result<Volume> {
    vol_expect_preprocessed(vol, "histogram_match")?;
    let sources = brain_landmarks(vol, &scale.percentiles)?;
    if sources.windows(2).any(|w| w[1] <= w[0]) {
        return Err(IguaneError::DegenerateInput(
            "volume landmarks are not strictly increasing; histogram matching \
             cannot build a monotone map"
                .into(),
        ));
    }
    let map = |x: f64| piecewise_linear(&sources, &scale.targets, x);
    let mut out = vol.clone();
    Zip::from(&mut out.data).and(&out.mask).for_each(|v, &m| {
        *v = if m { map(*v) } else { 0.0 };
    });
    Ok(out)
}

/// Piecewise-linear interpolation through the knots `(xs[i], ys[i])`,
/// extending the first and last segments beyond the boundary knots.
fn piecewise_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    // Which segment: the last i with xs[i] <= x, clamped to a real segment.
    let seg = match xs.partition_point(|&k| k <= x) {
        0 => 0,
        p => (p - 1).min(n - 2),
    };
    let (x0, x1) = (xs[seg], xs[seg + 1]);
    let (y0, y1) = (ys[seg], ys[seg + 1]);
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}
