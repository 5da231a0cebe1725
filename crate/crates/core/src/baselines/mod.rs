//! Harmonization baselines and the shared [`Harmonizer`] interface.
//!
//! Every harmonization method — the identity pass-through, histogram
//! matching, WhiteStripe, and the trained generator bundle — implements
//! [`Harmonizer`] and registers under a short name, so pipelines select
//! a method at runtime via [`create_harmonizer`].

pub mod hm;
pub mod ws;

use std::path::{Path, PathBuf};

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};
use crate::stats::percentile;
use crate::trainer::ModelBundle;
use crate::volume::{from_model_space, to_model_space, Space, Volume};

pub use hm::{histogram_match, learn_standard_scale, StandardScale, LANDMARK_PERCENTILES};
pub use ws::{stripe_stats, whitestripe, StripeStats};

/// Per-method intensity convention applied before feeding a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMethod {
    /// Divide by 500 and subtract 1 (median-normalized and generator
    /// outputs share this convention).
    PreprocOrIguane,
    /// Affine map sending brain p1/p99 to -0.5/+0.5.
    Hm,
    /// Affine map sending the white-stripe mean/sd to 0.7/0.01.
    Ws,
}

/// Background intensity of predictor-input volumes.
const PREDICTOR_BG: f64 = -1.0;

/// Applies the affine map `x -> offset + scale * x` to brain voxels and
/// pins the background at the predictor-input value.
fn affine_to_predictor(vol: &Volume, scale: f64, offset: f64) -> Volume {
    let mut out = vol.clone();
    Zip::from(&mut out.data).and(&out.mask).for_each(|v, &m| {
        *v = if m { offset + scale * *v } else { PREDICTOR_BG };
    });
    out.space = Space::ModelSpace;
    out
}

/// Rescales a harmonized volume into the common predictor-input
/// convention for its method. The statistics that parameterize the map
/// are recomputed from the volume itself, so the stated targets hold
/// exactly on the output.
pub fn rescale_for_predictor(vol: &Volume, method: RescaleMethod) -> Result<Volume> {
    if vol.space != Space::Preprocessed {
        return Err(IguaneError::State(format!(
            "rescale_for_predictor expects a Preprocessed volume, got {:?}",
            vol.space
        )));
    }
    match method {
        RescaleMethod::PreprocOrIguane => Ok(affine_to_predictor(vol, 1.0 / 500.0, -1.0)),
        RescaleMethod::Hm => {
            let vals = vol.brain_values();
            if vals.is_empty() {
                return Err(IguaneError::DegenerateInput(
                    "volume mask contains no voxels".into(),
                ));
            }
            let p1 = percentile(&vals, 1.0)?;
            let p99 = percentile(&vals, 99.0)?;
            if p99 <= p1 {
                return Err(IguaneError::DegenerateInput(
                    "brain p1 and p99 coincide; cannot rescale".into(),
                ));
            }
            // p1 -> -0.5 and p99 -> +0.5.
            let scale = 1.0 / (p99 - p1);
            Ok(affine_to_predictor(vol, scale, -0.5 - scale * p1))
        }
        RescaleMethod::Ws => {
            let stats = stripe_stats(vol)?;
            // stripe mean -> 0.7, stripe sd -> 0.01.
            let scale = 0.01 / stats.sd;
            Ok(affine_to_predictor(vol, scale, 0.7 - scale * stats.mean))
        }
    }
}

/// Runtime inputs a harmonizer may need when constructed by name.
#[derive(Debug, Clone, Default)]
pub struct HarmonizerContext {
    /// Directory holding a trained model bundle (required by `iguane`).
    pub model_dir: Option<PathBuf>,
}

/// A harmonization method: optionally fitted on reference volumes, then
/// applied per volume. All methods consume and produce volumes in the
/// Preprocessed space.
pub trait Harmonizer {
    /// Registry name of this method.
    fn name(&self) -> &'static str;

    /// Fits any method state from reference volumes. Methods without
    /// reference state accept any input, including an empty list.
    fn fit(&mut self, references: &[Volume]) -> Result<()>;

    /// Harmonizes one preprocessed volume.
    fn harmonize(&self, vol: &Volume) -> Result<Volume>;

    /// The predictor-input convention for this method's outputs.
    fn rescale_method(&self) -> RescaleMethod;

    /// Rescales one of this method's outputs into predictor-input space.
    fn rescale_for_predictor(&self, vol: &Volume) -> Result<Volume> {
        rescale_for_predictor(vol, self.rescale_method())
    }
}

/// Identity pass-through: preprocessed volumes are used as-is.
#[derive(Debug, Default)]
pub struct PreprocHarmonizer;

impl Harmonizer for PreprocHarmonizer {
    fn name(&self) -> &'static str {
        "preproc"
    }

    fn fit(&mut self, _references: &[Volume]) -> Result<()> {
        Ok(())
    }

    fn harmonize(&self, vol: &Volume) -> Result<Volume> {
        if vol.space != Space::Preprocessed {
            return Err(IguaneError::State(format!(
                "preproc harmonizer expects a Preprocessed volume, got {:?}",
                vol.space
            )));
        }
        Ok(vol.clone())
    }

    fn rescale_method(&self) -> RescaleMethod {
        RescaleMethod::PreprocOrIguane
    }
}

/// Histogram matching against a standard scale learned from references.
#[derive(Debug, Default)]
pub struct HmHarmonizer {
    pub scale: Option<StandardScale>,
}

impl HmHarmonizer {
    pub fn with_scale(scale: StandardScale) -> HmHarmonizer {
        HmHarmonizer { scale: Some(scale) }
    }
}

impl Harmonizer for HmHarmonizer {
    fn name(&self) -> &'static str {
        "hm"
    }

    fn fit(&mut self, references: &[Volume]) -> Result<()> {
        self.scale = Some(learn_standard_scale(references)?);
        Ok(())
    }

    fn harmonize(&self, vol: &Volume) -> Result<Volume> {
        let scale = self.scale.as_ref().ok_or_else(|| {
            IguaneError::State("hm harmonizer used before fitting a standard scale".into())
        })?;
        histogram_match(vol, scale)
    }

    fn rescale_method(&self) -> RescaleMethod {
        RescaleMethod::Hm
    }
}

/// WhiteStripe normalization; per-volume, no reference state.
#[derive(Debug, Default)]
pub struct WsHarmonizer;

impl Harmonizer for WsHarmonizer {
    fn name(&self) -> &'static str {
        "ws"
    }

    fn fit(&mut self, _references: &[Volume]) -> Result<()> {
        Ok(())
    }

    fn harmonize(&self, vol: &Volume) -> Result<Volume> {
        whitestripe(vol)
    }

    fn rescale_method(&self) -> RescaleMethod {
        RescaleMethod::Ws
    }
}

/// A trained generator bundle applied through the model space.
pub struct IguaneHarmonizer {
    pub bundle: ModelBundle,
}

impl IguaneHarmonizer {
    pub fn from_dir(dir: &Path) -> Result<IguaneHarmonizer> {
        Ok(IguaneHarmonizer {
            bundle: ModelBundle::load(dir)?,
        })
    }
}

impl Harmonizer for IguaneHarmonizer {
    fn name(&self) -> &'static str {
        "iguane"
    }

    fn fit(&mut self, _references: &[Volume]) -> Result<()> {
        Ok(())
    }

    fn harmonize(&self, vol: &Volume) -> Result<Volume> {
        if vol.space != Space::Preprocessed {
            return Err(IguaneError::State(format!(
                "iguane harmonizer expects a Preprocessed volume, got {:?}",
                vol.space
            )));
        }
        let model_in = to_model_space(vol)?;
        let model_out = self.bundle.harmonize(&model_in)?;
        from_model_space(&model_out)
    }

    fn rescale_method(&self) -> RescaleMethod {
        RescaleMethod::PreprocOrIguane
    }
}

/// Names accepted by [`create_harmonizer`].
pub const HARMONIZER_NAMES: [&str; 4] = ["preproc", "hm", "ws", "iguane"];

/// Builds the named harmonizer. `iguane` requires `ctx.model_dir`.
pub fn create_harmonizer(name: &str, ctx: &HarmonizerContext) -> Result<Box<dyn Harmonizer>> {
    match name {
        "preproc" => Ok(Box::new(PreprocHarmonizer)),
        "hm" => Ok(Box::new(HmHarmonizer::default())),
        "ws" => Ok(Box::new(WsHarmonizer)),
        "iguane" => {
            let dir = ctx.model_dir.as_ref().ok_or_else(|| {
                IguaneError::Config(
                    "the `iguane` harmonizer needs a model directory (set model_dir)".into(),
                )
            })?;
            Ok(Box::new(IguaneHarmonizer::from_dir(dir)?))
        }
        other => Err(IguaneError::Config(format!(
            "unknown harmonizer `{other}`; available: {}",
            HARMONIZER_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::{Distribution, Normal};

    use crate::config::{stream_rng, RunStamp};
    use crate::trainer::TrainingConfig;

    /// A preprocessed volume with three tissue-like Gaussian clusters and
    /// a background shell.
    fn brainlike(seed: u64) -> Volume {
        let mut rng = stream_rng(seed, "baselines-test");
        let side = 20;
        let mut data = Array3::zeros((side, side, side));
        let mut mask = Array3::from_elem((side, side, side), false);
        let specs = [(240.0, 20.0), (470.0, 25.0), (640.0, 15.0)];
        let dists: Vec<Normal<f64>> = specs
            .iter()
            .map(|&(m, s)| Normal::new(m, s).unwrap())
            .collect();
        let mut i = 0usize;
        for x in 1..side - 1 {
            for y in 1..side - 1 {
                for z in 1..side - 1 {
                    // Deterministic tissue layout, random intensities.
                    let tissue = match (x + 2 * y + 3 * z) % 6 {
                        0 => 0,
                        1 | 2 => 1,
                        _ => 2,
                    };
                    data[(x, y, z)] = dists[tissue].sample(&mut rng).max(1.0);
                    mask[(x, y, z)] = true;
                    i += 1;
                }
            }
        }
        assert!(i > 1000);
        Volume::new(data, mask, [1.0, 1.0, 1.0], Space::Preprocessed).unwrap()
    }

    #[test]
    fn registry_builds_every_stateless_method_by_name() {
        let ctx = HarmonizerContext::default();
        for name in ["preproc", "hm", "ws"] {
            let h = create_harmonizer(name, &ctx).unwrap();
            assert_eq!(h.name(), name);
        }
    }

    #[test]
    fn unknown_name_is_a_config_error_listing_choices() {
        let err = match create_harmonizer("zscore", &HarmonizerContext::default()) {
            Ok(_) => panic!("unknown name must not build a harmonizer"),
            Err(e) => e,
        };
        match err {
            IguaneError::Config(msg) => {
                for name in HARMONIZER_NAMES {
                    assert!(msg.contains(name), "missing `{name}` in: {msg}");
                }
            }
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn iguane_without_model_dir_is_a_config_error() {
        assert!(matches!(
            create_harmonizer("iguane", &HarmonizerContext::default()),
            Err(IguaneError::Config(_))
        ));
    }

    #[test]
    fn preproc_harmonizer_is_identity() {
        let v = brainlike(11);
        let mut h = create_harmonizer("preproc", &HarmonizerContext::default()).unwrap();
        h.fit(&[]).unwrap();
        let out = h.harmonize(&v).unwrap();
        assert_eq!(out.data, v.data);
        assert_eq!(out.mask, v.mask);
    }

    #[test]
    fn hm_harmonizer_requires_fit_first() {
        let v = brainlike(12);
        let h = HmHarmonizer::default();
        assert!(matches!(h.harmonize(&v), Err(IguaneError::State(_))));
    }

    #[test]
    fn hm_harmonizer_fits_and_matches() {
        let refs = [brainlike(13), brainlike(14)];
        let mut h = create_harmonizer("hm", &HarmonizerContext::default()).unwrap();
        h.fit(&refs).unwrap();
        let v = brainlike(15);
        let out = h.harmonize(&v).unwrap();
        assert_eq!(out.mask, v.mask);
        assert_eq!(out.space, Space::Preprocessed);
        // Landmarks now sit on the learned scale.
        let scale = learn_standard_scale(&refs).unwrap();
        let vals = out.brain_values();
        for (q, t) in LANDMARK_PERCENTILES.iter().zip(&scale.targets) {
            let got = percentile(&vals, *q).unwrap();
            // Interior landmarks are exact knots; sampling granularity
            // only perturbs the estimate, not the knot mapping.
            assert!(
                (got - t).abs() < (0.02 * t.abs()).max(2.0),
                "p{q}: {got} vs {t}"
            );
        }
    }

    #[test]
    fn rescale_preproc_centers_brain_median() {
        let v = brainlike(16);
        // Force an exact median of 500 to pin the oracle.
        let med = percentile(&v.brain_values(), 50.0).unwrap();
        let mut v2 = v.clone();
        Zip::from(&mut v2.data).and(&v2.mask).for_each(|x, &m| {
            if m {
                *x *= 500.0 / med;
            }
        });
        let out = rescale_for_predictor(&v2, RescaleMethod::PreprocOrIguane).unwrap();
        let med_out = percentile(&out.brain_values(), 50.0).unwrap();
        assert!(med_out.abs() < 1e-9, "median {med_out}");
        assert_eq!(out.space, Space::ModelSpace);
        // Background voxels are pinned at -1.
        Zip::from(&out.data).and(&out.mask).for_each(|&x, &m| {
            if !m {
                assert_eq!(x, -1.0);
            }
        });
    }

    #[test]
    fn rescale_hm_pins_p1_and_p99_exactly() {
        let refs = [brainlike(17)];
        let mut h = HmHarmonizer::default();
        h.fit(&refs).unwrap();
        let matched = h.harmonize(&brainlike(18)).unwrap();
        let out = h.rescale_for_predictor(&matched).unwrap();
        let vals = out.brain_values();
        let p1 = percentile(&vals, 1.0).unwrap();
        let p99 = percentile(&vals, 99.0).unwrap();
        assert!((p1 + 0.5).abs() < 1e-9, "p1 {p1}");
        assert!((p99 - 0.5).abs() < 1e-9, "p99 {p99}");
    }

    #[test]
    fn rescale_ws_pins_stripe_mean_and_sd_exactly() {
        let h = WsHarmonizer;
        let normalized = h.harmonize(&brainlike(19)).unwrap();
        let out = h.rescale_for_predictor(&normalized).unwrap();
        // Recompute the stripe on the rescaled volume: the affine map
        // preserves histogram bins, the detected mode, and quantile
        // windows, so the stripe statistics land exactly on target.
        let mut as_preproc = out.clone();
        as_preproc.space = Space::Preprocessed;
        let stats = stripe_stats(&as_preproc).unwrap();
        assert!((stats.mean - 0.7).abs() < 1e-9, "stripe mean {}", stats.mean);
        assert!((stats.sd - 0.01).abs() < 1e-9, "stripe sd {}", stats.sd);
    }

    #[test]
    fn rescale_rejects_non_preprocessed_volumes() {
        let mut v = brainlike(20);
        v.space = Space::Raw;
        for method in [
            RescaleMethod::PreprocOrIguane,
            RescaleMethod::Hm,
            RescaleMethod::Ws,
        ] {
            assert!(matches!(
                rescale_for_predictor(&v, method),
                Err(IguaneError::State(_))
            ));
        }
    }

    #[test]
    fn iguane_harmonizer_roundtrips_a_fresh_bundle() {
        // A newly initialized bundle is the identity in model space, so
        // harmonizing through it returns the input to fp precision.
        let mut config = TrainingConfig::default();
        config.generator.base = 2;
        config.generator.levels = 2;
        config.discriminator.base = 2;
        config.discriminator.levels = 2;
        let bundle =
            ModelBundle::new(&config, "ref", &["site_a".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stamp = RunStamp::new(&config, config.seed).unwrap();
        bundle.save(dir.path(), &stamp).unwrap();

        let ctx = HarmonizerContext {
            model_dir: Some(dir.path().to_path_buf()),
        };
        let h = create_harmonizer("iguane", &ctx).unwrap();
        assert_eq!(h.name(), "iguane");
        let v = brainlike(21);
        let out = h.harmonize(&v).unwrap();
        assert_eq!(out.space, Space::Preprocessed);
        assert_eq!(out.mask, v.mask);
        Zip::from(&out.data)
            .and(&v.data)
            .and(&v.mask)
            .for_each(|&a, &b, &m| {
                if m {
                    assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
                } else {
                    assert_eq!(a, 0.0);
                }
            });
        // And its predictor rescale follows the shared convention.
        let rescaled = h.rescale_for_predictor(&out).unwrap();
        assert_eq!(rescaled.space, Space::ModelSpace);
    }

    #[test]
    fn rescale_method_serde_names_are_snake_case() {
        let j = serde_json::to_string(&RescaleMethod::PreprocOrIguane).unwrap();
        assert_eq!(j, "\"preproc_or_iguane\"");
        let m: RescaleMethod = serde_json::from_str("\"ws\"").unwrap();
        assert_eq!(m, RescaleMethod::Ws);
    }
}
