//! The many-to-one adversarial training engine: configuration, data
//! wrangling, the per-site update schedule, validation-based model
//! selection, ablation variants, and checkpointing.
//!
//! One *site-step* follows the three-part schedule of the training figure:
//! (a) update the forward discriminator for site `i` on reference images
//! versus forward-generator fakes, (b) update the backward discriminator
//! for site `i` on site images versus backward-generator fakes, and
//! (c) jointly update the forward generator and site `i`'s backward
//! generator with adversarial, cycle (both directions) and identity
//! losses. A *step* runs one site-step for every source site in random
//! order; an epoch is `steps_per_epoch` steps.
//!
//! Fake images fed to discriminator updates are produced by eager
//! generator passes, so they are constants on the discriminator's tape
//! (the classic "detach"); during the joint generator update the
//! discriminator parameters are bound without gradients, so the update
//! can never touch them.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stream_rng, RunStamp};
use crate::error::{IguaneError, Result};
use crate::manifest::{Manifest, Sex};
use crate::networks::arch::{
    Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Predictor, PredictorHead,
    PredictorSpec,
};
use crate::networks::checkpoint::{Checkpoint, CheckpointWriter};
use crate::networks::{BoundParams, ParamSet, TapeBackend};
use crate::sampler::{compute_sampling_weights, default_bin_edges, SamplingPlan};
use crate::tensor::tape::{Gradients, Tape, Var};
use crate::volume::{
    load_volume, median_normalize, pad_to_multiple, to_model_space, unpad, Space, Volume,
};

use super::adam::{collect_grads, lr_at, Adam, GradMap};
use super::augment::{augment, AugmentParams};

/// Center of the design age range (18..80 years); ages are mapped to
/// roughly [-1, 1] before regression so the predictor head starts in its
/// linear regime.
pub const AGE_NORM_CENTER: f64 = 49.0;
/// Half-width of the design age range.
pub const AGE_NORM_SCALE: f64 = 31.0;

pub fn normalize_age(age: f64) -> f64 {
    (age - AGE_NORM_CENTER) / AGE_NORM_SCALE
}

pub fn denormalize_age(normed: f64) -> f64 {
    normed * AGE_NORM_SCALE + AGE_NORM_CENTER
}

// ======================================================================
// Configuration
// ======================================================================

/// Training variants: the full method plus the two reduced comparison
/// configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full method: one forward discriminator per source site,
    /// age-balanced sampling.
    #[default]
    None,
    /// A single forward discriminator shared by all source sites.
    SingleFwdDisc,
    /// Single forward discriminator and uniform (age-blind) sampling.
    SingleFwdDiscUniformSampling,
}

impl Ablation {
    pub fn single_fwd_disc(self) -> bool {
        matches!(
            self,
            Ablation::SingleFwdDisc | Ablation::SingleFwdDiscUniformSampling
        )
    }

    pub fn uniform_sampling(self) -> bool {
        matches!(self, Ablation::SingleFwdDiscUniformSampling)
    }
}

fn d_n_epochs() -> usize {
    100
}
fn d_steps_per_epoch() -> usize {
    200
}
fn d_gen_batch() -> usize {
    1
}
fn d_disc_batch() -> usize {
    2
}
fn d_lr_start() -> f64 {
    2e-4
}
fn d_lr_end() -> f64 {
    2e-5
}
fn d_lambda_cyc() -> f64 {
    30.0
}
fn d_lambda_id() -> f64 {
    15.0
}
fn d_validation_every() -> usize {
    5
}
fn d_metric_weights() -> [f64; 2] {
    [0.75, 0.25]
}
fn d_adam_beta1() -> f64 {
    0.5
}
fn d_adam_beta2() -> f64 {
    0.999
}
fn d_loss_scale() -> f64 {
    1024.0
}
fn d_predictor_epochs() -> usize {
    20
}
fn d_predictor_lr() -> f64 {
    1e-3
}

/// Everything the training loop needs to know, serializable as the run's
/// declarative config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "d_n_epochs")]
    pub n_epochs: usize,
    #[serde(default = "d_steps_per_epoch")]
    pub steps_per_epoch: usize,
    /// Image pairs per joint generator update.
    #[serde(default = "d_gen_batch")]
    pub gen_batch: usize,
    /// Real (and fake) images per discriminator update.
    #[serde(default = "d_disc_batch")]
    pub disc_batch: usize,
    #[serde(default = "d_lr_start")]
    pub lr_start: f64,
    #[serde(default = "d_lr_end")]
    pub lr_end: f64,
    #[serde(default = "d_lambda_cyc")]
    pub lambda_cyc: f64,
    /// Must equal `lambda_cyc / 2`; kept explicit so config files state it.
    #[serde(default = "d_lambda_id")]
    pub lambda_id: f64,
    /// Validate (and snapshot) every this many epochs.
    #[serde(default = "d_validation_every")]
    pub validation_every: usize,
    /// Weights of (age R², sex accuracy) in the validation score.
    #[serde(default = "d_metric_weights")]
    pub validation_metric_weights: [f64; 2],
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub augmentation: AugmentParams,
    #[serde(default = "d_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_adam_beta2")]
    pub adam_beta2: f64,
    /// Round every tape operation through f32 and guard updates with loss
    /// scaling; full-precision results stay the reproducibility reference.
    #[serde(default)]
    pub mixed_precision: bool,
    #[serde(default = "d_loss_scale")]
    pub loss_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
    /// Spec for the validation predictors; the head is overridden per
    /// metric (linear for age, logistic for sex).
    #[serde(default)]
    pub predictor: PredictorSpec,
    #[serde(default = "d_predictor_epochs")]
    pub predictor_epochs: usize,
    #[serde(default = "d_predictor_lr")]
    pub predictor_lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_epochs: d_n_epochs(),
            steps_per_epoch: d_steps_per_epoch(),
            gen_batch: d_gen_batch(),
            disc_batch: d_disc_batch(),
            lr_start: d_lr_start(),
            lr_end: d_lr_end(),
            lambda_cyc: d_lambda_cyc(),
            lambda_id: d_lambda_id(),
            validation_every: d_validation_every(),
            validation_metric_weights: d_metric_weights(),
            ablation: Ablation::None,
            augmentation: AugmentParams::default(),
            adam_beta1: d_adam_beta1(),
            adam_beta2: d_adam_beta2(),
            mixed_precision: false,
            loss_scale: d_loss_scale(),
            seed: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            predictor: PredictorSpec::default(),
            predictor_epochs: d_predictor_epochs(),
            predictor_lr: d_predictor_lr(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(IguaneError::Config(
                "n_epochs and steps_per_epoch must be at least 1".into(),
            ));
        }
        if self.gen_batch == 0 || self.disc_batch == 0 {
            return Err(IguaneError::Config(
                "gen_batch and disc_batch must be at least 1".into(),
            ));
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_end", self.lr_end)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(IguaneError::Config(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        if !self.lambda_cyc.is_finite() || self.lambda_cyc <= 0.0 {
            return Err(IguaneError::Config(format!(
                "lambda_cyc must be finite and positive, got {}",
                self.lambda_cyc
            )));
        }
        if self.lambda_id != self.lambda_cyc / 2.0 {
            return Err(IguaneError::Config(format!(
                "lambda_id must equal lambda_cyc/2 = {}, got {}",
                self.lambda_cyc / 2.0,
                self.lambda_id
            )));
        }
        if self.validation_every == 0 {
            return Err(IguaneError::Config(
                "validation_every must be at least 1".into(),
            ));
        }
        let [wr, wa] = self.validation_metric_weights;
        if !wr.is_finite() || !wa.is_finite() || wr < 0.0 || wa < 0.0 || wr + wa == 0.0 {
            return Err(IguaneError::Config(format!(
                "validation metric weights must be non-negative and not both zero, got {:?}",
                self.validation_metric_weights
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(IguaneError::Config(
                "Adam betas must lie in [0, 1)".into(),
            ));
        }
        if !self.loss_scale.is_finite() || self.loss_scale <= 0.0 {
            return Err(IguaneError::Config(format!(
                "loss_scale must be finite and positive, got {}",
                self.loss_scale
            )));
        }
        if self.predictor_epochs == 0 {
            return Err(IguaneError::Config(
                "predictor_epochs must be at least 1".into(),
            ));
        }
        if !self.predictor_lr.is_finite() || self.predictor_lr <= 0.0 {
            return Err(IguaneError::Config(format!(
                "predictor_lr must be finite and positive, got {}",
                self.predictor_lr
            )));
        }
        self.augmentation.validate()?;
        Ok(())
    }
}

// ======================================================================
// Training data
// ======================================================================

/// One model-space image with the covariates training needs.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub volume: Volume,
}

/// All training images of one site.
#[derive(Debug, Clone)]
pub struct SiteSet {
    pub site_id: String,
    pub images: Vec<TrainImage>,
}

impl SiteSet {
    pub fn ages(&self) -> Vec<f64> {
        self.images.iter().map(|im| im.age).collect()
    }
}

/// Reference-site images plus one [`SiteSet`] per source site, sorted by
/// site id.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub reference: SiteSet,
    pub sources: Vec<SiteSet>,
}

impl TrainData {
    /// Loads every manifest image, runs the median normalization and
    /// model-space mapping, and groups by site. `reference_site` picks
    /// which group acts as the harmonization target.
    pub fn from_manifest(manifest: &Manifest, reference_site: &str) -> Result<TrainData> {
        let mut by_site: BTreeMap<String, Vec<TrainImage>> = BTreeMap::new();
        for rec in &manifest.records {
            let raw = load_volume(&manifest.resolve_path(rec))?;
            let normed = median_normalize(&raw)?;
            let model = to_model_space(&normed)?;
            by_site.entry(rec.site_id.clone()).or_default().push(TrainImage {
                subject_id: rec.subject_id.clone(),
                age: rec.age,
                sex: rec.sex,
                volume: model,
            });
        }
        let reference_images = by_site.remove(reference_site).ok_or_else(|| {
            IguaneError::Data(format!(
                "reference site `{reference_site}` has no images in the manifest"
            ))
        })?;
        if by_site.is_empty() {
            return Err(IguaneError::Data(
                "training needs at least one source site besides the reference".into(),
            ));
        }
        Ok(TrainData {
            reference: SiteSet {
                site_id: reference_site.to_string(),
                images: reference_images,
            },
            sources: by_site
                .into_iter()
                .map(|(site_id, images)| SiteSet { site_id, images })
                .collect(),
        })
    }

    /// Moves the last `per_site` images of every source site into a holdout
    /// list for validation. Deterministic (no RNG): manifests list images
    /// in a stable order, so reruns split identically.
    pub fn split_holdout(&mut self, per_site: usize) -> Result<Vec<TrainImage>> {
        let mut holdout = Vec::new();
        for site in &mut self.sources {
            if site.images.len() <= per_site {
                return Err(IguaneError::Data(format!(
                    "site `{}` has {} images; cannot hold out {per_site} and still train",
                    site.site_id,
                    site.images.len()
                )));
            }
            let tail = site.images.split_off(site.images.len() - per_site);
            holdout.extend(tail);
        }
        Ok(holdout)
    }

    /// Checks that every image is in model space with extents the generator
    /// can consume without padding.
    pub fn validate_for(&self, gen: &GeneratorSpec) -> Result<()> {
        let check_site = |site: &SiteSet| -> Result<()> {
            if site.images.is_empty() {
                return Err(IguaneError::Data(format!(
                    "site `{}` has no training images",
                    site.site_id
                )));
            }
            for im in &site.images {
                if im.volume.space != Space::ModelSpace {
                    return Err(IguaneError::State(format!(
                        "training image `{}` is in {:?} space, expected ModelSpace",
                        im.subject_id, im.volume.space
                    )));
                }
                let a = gen.alignment();
                if im.volume.dims().iter().any(|&d| d % a != 0) {
                    return Err(IguaneError::Shape(format!(
                        "training image `{}` has dims {:?}, not divisible by the \
                         generator alignment {a}",
                        im.subject_id,
                        im.volume.dims()
                    )));
                }
            }
            Ok(())
        };
        check_site(&self.reference)?;
        if self.sources.is_empty() {
            return Err(IguaneError::Data(
                "training needs at least one source site".into(),
            ));
        }
        for site in &self.sources {
            check_site(site)?;
        }
        Ok(())
    }
}

/// Adds the channel axis: `[x, y, z]` data becomes a `[1, x, y, z]`
/// network input.
pub fn net_input(vol: &Volume) -> ArrayD<f64> {
    vol.data.clone().into_dyn().insert_axis(Axis(0))
}

/// Interprets a `[1, x, y, z]` network output as a volume shaped like
/// `like` (same mask, voxel size and space).
pub fn net_output_to_volume(out: &ArrayD<f64>, like: &Volume) -> Result<Volume> {
    let dims = like.dims();
    if out.shape() != [1, dims[0], dims[1], dims[2]] {
        return Err(IguaneError::Shape(format!(
            "network output shape {:?} does not match volume dims {:?}",
            out.shape(),
            dims
        )));
    }
    let data = Array3::from_shape_vec(
        (dims[0], dims[1], dims[2]),
        out.iter().copied().collect(),
    )
    .map_err(|e| IguaneError::Shape(format!("output reshape: {e}")))?;
    Ok(Volume {
        data,
        mask: like.mask.clone(),
        voxel_size: like.voxel_size,
        space: like.space,
    })
}

// ======================================================================
// Training log
// ======================================================================

/// One line of the training log (serialized as line-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    SiteStep {
        epoch: usize,
        step: usize,
        site_id: String,
        lr: f64,
        disc_fwd_loss: f64,
        disc_bwd_loss: f64,
        adversarial: f64,
        cycle: f64,
        identity: f64,
        objective: f64,
        /// True when mixed-precision overflow skipped at least one of the
        /// three updates in this site-step.
        skipped: bool,
    },
    Validation {
        epoch: usize,
        r_squared: f64,
        accuracy: f64,
        score: f64,
        is_best: bool,
    },
}

/// Writes the log as one JSON object per line.
pub fn write_log_jsonl(records: &[LogRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| IguaneError::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| IguaneError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| IguaneError::Config(format!("log serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| IguaneError::io(path, e))?;
    }
    w.flush().map_err(|e| IguaneError::io(path, e))?;
    Ok(())
}

// ======================================================================
// Model bundle
// ======================================================================

const BUNDLE_KIND: &str = "model-bundle";
const SHARED_DISC: &str = "shared";

/// Every network of one harmonization model: the forward generator, one
/// backward generator per source site, and the discriminators (one forward
/// discriminator per site, or a single shared one under the ablations).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub reference_site: String,
    pub source_sites: Vec<String>,
    pub ablation: Ablation,
    pub gen_fwd: Generator,
    pub gen_bwd: Vec<Generator>,
    pub disc_fwd: Vec<Discriminator>,
    pub disc_bwd: Vec<Discriminator>,
    pub best_validation_score: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl ModelBundle {
    /// Fresh networks, deterministically initialized from the config seed.
    pub fn new(
        config: &TrainingConfig,
        reference_site: &str,
        source_sites: &[String],
    ) -> Result<ModelBundle> {
        if source_sites.is_empty() {
            return Err(IguaneError::Data(
                "a model bundle needs at least one source site".into(),
            ));
        }
        let seed = config.seed;
        let gen_fwd = Generator::new(
            config.generator.clone(),
            &mut stream_rng(seed, "init/gen_fwd"),
        )?;
        let mut gen_bwd = Vec::new();
        let mut disc_bwd = Vec::new();
        for site in source_sites {
            gen_bwd.push(Generator::new(
                config.generator.clone(),
                &mut stream_rng(seed, &format!("init/gen_bwd/{site}")),
            )?);
            disc_bwd.push(Discriminator::new(
                config.discriminator.clone(),
                &mut stream_rng(seed, &format!("init/disc_bwd/{site}")),
            )?);
        }
        let disc_fwd = if config.ablation.single_fwd_disc() {
            vec![Discriminator::new(
                config.discriminator.clone(),
                &mut stream_rng(seed, &format!("init/disc_fwd/{SHARED_DISC}")),
            )?]
        } else {
            source_sites
                .iter()
                .map(|site| {
                    Discriminator::new(
                        config.discriminator.clone(),
                        &mut stream_rng(seed, &format!("init/disc_fwd/{site}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(ModelBundle {
            reference_site: reference_site.to_string(),
            source_sites: source_sites.to_vec(),
            ablation: config.ablation,
            gen_fwd,
            gen_bwd,
            disc_fwd,
            disc_bwd,
            best_validation_score: None,
            best_epoch: None,
        })
    }

    pub fn n_source_sites(&self) -> usize {
        self.source_sites.len()
    }

    pub fn site_index(&self, site_id: &str) -> Result<usize> {
        self.source_sites
            .iter()
            .position(|s| s == site_id)
            .ok_or_else(|| {
                IguaneError::Data(format!("site `{site_id}` is not registered in the bundle"))
            })
    }

    /// Which forward discriminator serves a source site (always 0 under
    /// the shared-discriminator ablations).
    pub fn disc_fwd_index(&self, site_index: usize) -> usize {
        if self.ablation.single_fwd_disc() {
            0
        } else {
            site_index
        }
    }

    /// Inference: maps a model-space volume toward the reference site.
    /// Pads to the generator alignment, runs the forward generator, crops
    /// back, clips intensities below the model-space floor of -1, and
    /// restores exact background.
    pub fn harmonize(&self, vol: &Volume) -> Result<Volume> {
        if vol.space != Space::ModelSpace {
            return Err(IguaneError::State(format!(
                "harmonize expects a ModelSpace volume, got {:?}",
                vol.space
            )));
        }
        let (padded, info) = pad_to_multiple(vol, self.gen_fwd.spec.alignment());
        let out = self.gen_fwd.forward(&net_input(&padded))?;
        let out_vol = net_output_to_volume(&out, &padded)?;
        let mut result = unpad(&out_vol, &info);
        let bg = result.background_value();
        ndarray::Zip::from(&mut result.data)
            .and(&result.mask)
            .for_each(|v, &m| {
                *v = if m { v.max(-1.0) } else { bg };
            });
        Ok(result)
    }

    /// Serializes all networks into a checkpoint directory.
    pub fn save(&self, dir: &Path, stamp: &RunStamp) -> Result<()> {
        let mut writer = CheckpointWriter::new();
        writer.add_params("gen_fwd", &self.gen_fwd.params);
        for (site, gen) in self.source_sites.iter().zip(&self.gen_bwd) {
            writer.add_params(&format!("gen_bwd/{site}"), &gen.params);
        }
        if self.ablation.single_fwd_disc() {
            writer.add_params(&format!("disc_fwd/{SHARED_DISC}"), &self.disc_fwd[0].params);
        } else {
            for (site, disc) in self.source_sites.iter().zip(&self.disc_fwd) {
                writer.add_params(&format!("disc_fwd/{site}"), &disc.params);
            }
        }
        for (site, disc) in self.source_sites.iter().zip(&self.disc_bwd) {
            writer.add_params(&format!("disc_bwd/{site}"), &disc.params);
        }
        let specs = serde_json::json!({
            "reference_site": self.reference_site,
            "source_sites": self.source_sites,
            "ablation": self.ablation,
            "generator": self.gen_fwd.spec,
            "discriminator": self.disc_bwd[0].spec,
            "best_validation_score": self.best_validation_score,
            "best_epoch": self.best_epoch,
        });
        writer.write(dir, BUNDLE_KIND, specs, stamp)
    }

    /// Loads a bundle from a checkpoint directory written by [`Self::save`].
    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let ckpt = Checkpoint::read(dir)?;
        ckpt.expect_kind(BUNDLE_KIND)?;
        let reference_site: String = ckpt.spec_field("reference_site")?;
        let source_sites: Vec<String> = ckpt.spec_field("source_sites")?;
        let ablation: Ablation = ckpt.spec_field("ablation")?;
        let gen_spec: GeneratorSpec = ckpt.spec_field("generator")?;
        let disc_spec: DiscriminatorSpec = ckpt.spec_field("discriminator")?;
        let best_validation_score: Option<f64> = ckpt.spec_field("best_validation_score")?;
        let best_epoch: Option<usize> = ckpt.spec_field("best_epoch")?;
        let mut scratch = stream_rng(0, "checkpoint-load");
        let mut load_gen = |prefix: &str| -> Result<Generator> {
            let mut g = Generator::new(gen_spec.clone(), &mut scratch)?;
            ckpt.load_into(prefix, &mut g.params)?;
            Ok(g)
        };
        let gen_fwd = load_gen("gen_fwd")?;
        let mut gen_bwd = Vec::new();
        for site in &source_sites {
            gen_bwd.push(load_gen(&format!("gen_bwd/{site}"))?);
        }
        let mut scratch = stream_rng(0, "checkpoint-load");
        let mut load_disc = |prefix: &str| -> Result<Discriminator> {
            let mut d = Discriminator::new(disc_spec.clone(), &mut scratch)?;
            ckpt.load_into(prefix, &mut d.params)?;
            Ok(d)
        };
        let disc_fwd = if ablation.single_fwd_disc() {
            vec![load_disc(&format!("disc_fwd/{SHARED_DISC}"))?]
        } else {
            source_sites
                .iter()
                .map(|site| load_disc(&format!("disc_fwd/{site}")))
                .collect::<Result<Vec<_>>>()?
        };
        let mut disc_bwd = Vec::new();
        for site in &source_sites {
            disc_bwd.push(load_disc(&format!("disc_bwd/{site}"))?);
        }
        Ok(ModelBundle {
            reference_site,
            source_sites,
            ablation,
            gen_fwd,
            gen_bwd,
            disc_fwd,
            disc_bwd,
            best_validation_score,
            best_epoch,
        })
    }
}

// ======================================================================
// Update mechanics
// ======================================================================

/// Loss components of one joint generator update. Component values are
/// the sums over both translation directions, averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct GenStepStats {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub objective: f64,
    pub skipped: bool,
}

fn make_tape(mixed: bool) -> Tape {
    if mixed {
        Tape::new_round_f32()
    } else {
        Tape::new()
    }
}

/// Runs backward under the precision policy. Full precision: a non-finite
/// loss is a state error. Mixed precision: the loss is scaled before
/// backward and a non-finite loss skips the update (returns `None`).
fn backward_with_policy(
    tape: &Tape,
    loss: Var,
    loss_val: f64,
    mixed: bool,
    loss_scale: f64,
) -> Result<Option<Gradients>> {
    if !loss_val.is_finite() {
        if mixed {
            return Ok(None);
        }
        return Err(IguaneError::State(format!(
            "non-finite training loss ({loss_val})"
        )));
    }
    let root = if mixed { tape.scale(loss, loss_scale) } else { loss };
    Ok(Some(tape.backward(root)?))
}

/// Collects (and in mixed precision unscales) one network's gradients.
/// Mixed-precision overflow yields `None` (skip the update).
fn grads_with_policy(
    bound: &BoundParams,
    grads: &Gradients,
    mixed: bool,
    loss_scale: f64,
) -> Option<GradMap> {
    let mut map = collect_grads(bound, grads);
    if mixed {
        let inv = 1.0 / loss_scale;
        let mut overflow = false;
        for g in map.values_mut() {
            g.mapv_inplace(|v| v * inv);
            if g.iter().any(|v| !v.is_finite()) {
                overflow = true;
            }
        }
        if overflow {
            return None;
        }
    }
    Some(map)
}

fn ensure_finite_params(context: &str, params: &ParamSet) -> Result<()> {
    for (name, p) in params.iter() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(IguaneError::State(format!(
                "non-finite parameter `{name}` in {context} after update"
            )));
        }
    }
    Ok(())
}

/// One least-squares discriminator update on pre-generated (detached)
/// fakes: `0.5 * mean_real (D(x)-1)^2 + 0.5 * mean_fake D(x)^2`.
/// Returns the loss value and whether the update was skipped.
fn disc_update(
    disc: &mut Discriminator,
    adam: &mut Adam,
    reals: &[ArrayD<f64>],
    fakes: &[ArrayD<f64>],
    lr: f64,
    mixed: bool,
    loss_scale: f64,
) -> Result<(f64, bool)> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(IguaneError::Data(
            "discriminator update needs at least one real and one fake image".into(),
        ));
    }
    let tape = make_tape(mixed);
    let bound = BoundParams::bind(&tape, &disc.params, true);
    let mut terms: Vec<(f64, Var)> = Vec::new();
    {
        let mut be = TapeBackend {
            tape: &tape,
            params: &bound,
        };
        for r in reals {
            let x = tape.leaf(r.clone(), false);
            let s = disc.run(&mut be, &x)?;
            terms.push((0.5 / reals.len() as f64, tape.mse_to(s, 1.0)));
        }
        for f in fakes {
            let x = tape.leaf(f.clone(), false);
            let s = disc.run(&mut be, &x)?;
            terms.push((0.5 / fakes.len() as f64, tape.mse_to(s, 0.0)));
        }
    }
    let loss = tape.sum_weighted(&terms)?;
    let loss_val = tape.value(loss)[[0]];
    let Some(grads) = backward_with_policy(&tape, loss, loss_val, mixed, loss_scale)? else {
        return Ok((loss_val, true));
    };
    let Some(gmap) = grads_with_policy(&bound, &grads, mixed, loss_scale) else {
        return Ok((loss_val, true));
    };
    adam.step(&mut disc.params, &gmap, lr)?;
    ensure_finite_params("discriminator", &disc.params)?;
    Ok((loss_val, false))
}

/// The joint generator update: adversarial + cycle + identity losses in
/// both translation directions, backpropagated through frozen
/// discriminators into both generators at once.
#[allow(clippy::too_many_arguments)]
fn gen_joint_update(
    gen_fwd: &mut Generator,
    gen_bwd: &mut Generator,
    disc_fwd: &Discriminator,
    disc_bwd: &Discriminator,
    adam_fwd: &mut Adam,
    adam_bwd: &mut Adam,
    ref_imgs: &[ArrayD<f64>],
    site_imgs: &[ArrayD<f64>],
    lambda: f64,
    lr: f64,
    mixed: bool,
    loss_scale: f64,
) -> Result<GenStepStats> {
    if ref_imgs.is_empty() || ref_imgs.len() != site_imgs.len() {
        return Err(IguaneError::Data(format!(
            "generator update needs matched non-empty batches, got {} reference and {} site images",
            ref_imgs.len(),
            site_imgs.len()
        )));
    }
    let tape = make_tape(mixed);
    let b_gf = BoundParams::bind(&tape, &gen_fwd.params, true);
    let b_gb = BoundParams::bind(&tape, &gen_bwd.params, true);
    // Frozen: adversarial gradients flow through the discriminators into
    // the generators, but the discriminator weights collect no gradient.
    let b_df = BoundParams::bind(&tape, &disc_fwd.params, false);
    let b_db = BoundParams::bind(&tape, &disc_bwd.params, false);
    let mut be_gf = TapeBackend {
        tape: &tape,
        params: &b_gf,
    };
    let mut be_gb = TapeBackend {
        tape: &tape,
        params: &b_gb,
    };
    let mut be_df = TapeBackend {
        tape: &tape,
        params: &b_df,
    };
    let mut be_db = TapeBackend {
        tape: &tape,
        params: &b_db,
    };
    let n_pairs = ref_imgs.len() as f64;
    let w = 1.0 / n_pairs;
    let mut terms: Vec<(f64, Var)> = Vec::new();
    let (mut adv_sum, mut cyc_sum, mut id_sum) = (0.0, 0.0, 0.0);
    let sval = |v: Var| tape.value(v)[[0]];
    for (r, s) in ref_imgs.iter().zip(site_imgs) {
        let xr = tape.leaf(r.clone(), false);
        let xs = tape.leaf(s.clone(), false);
        // Translations.
        let fake_ref = gen_fwd.run(&mut be_gf, &xs)?;
        let fake_site = gen_bwd.run(&mut be_gb, &xr)?;
        // Adversarial: fool both discriminators.
        let adv_f = tape.mse_to(disc_fwd.run(&mut be_df, &fake_ref)?, 1.0);
        let adv_b = tape.mse_to(disc_bwd.run(&mut be_db, &fake_site)?, 1.0);
        // Cycles: site -> reference -> site and reference -> site -> reference.
        let cyc_s = tape.l1_diff_mean(gen_bwd.run(&mut be_gb, &fake_ref)?, xs)?;
        let cyc_r = tape.l1_diff_mean(gen_fwd.run(&mut be_gf, &fake_site)?, xr)?;
        // Identity: each generator must preserve its own target domain.
        let id_r = tape.l1_diff_mean(gen_fwd.run(&mut be_gf, &xr)?, xr)?;
        let id_s = tape.l1_diff_mean(gen_bwd.run(&mut be_gb, &xs)?, xs)?;
        adv_sum += w * (sval(adv_f) + sval(adv_b));
        cyc_sum += w * (sval(cyc_s) + sval(cyc_r));
        id_sum += w * (sval(id_r) + sval(id_s));
        terms.extend([
            (w, adv_f),
            (w, adv_b),
            (w * lambda, cyc_s),
            (w * lambda, cyc_r),
            (w * lambda / 2.0, id_r),
            (w * lambda / 2.0, id_s),
        ]);
    }
    let obj = tape.sum_weighted(&terms)?;
    let obj_val = tape.value(obj)[[0]];
    let stats = |skipped| GenStepStats {
        adversarial: adv_sum,
        cycle: cyc_sum,
        identity: id_sum,
        objective: obj_val,
        skipped,
    };
    let Some(grads) = backward_with_policy(&tape, obj, obj_val, mixed, loss_scale)? else {
        return Ok(stats(true));
    };
    // Collect both maps before stepping either optimizer, so an overflow
    // in one never leaves the pair half-updated.
    let Some(g_fwd) = grads_with_policy(&b_gf, &grads, mixed, loss_scale) else {
        return Ok(stats(true));
    };
    let Some(g_bwd) = grads_with_policy(&b_gb, &grads, mixed, loss_scale) else {
        return Ok(stats(true));
    };
    adam_fwd.step(&mut gen_fwd.params, &g_fwd, lr)?;
    adam_bwd.step(&mut gen_bwd.params, &g_bwd, lr)?;
    ensure_finite_params("forward generator", &gen_fwd.params)?;
    ensure_finite_params("backward generator", &gen_bwd.params)?;
    Ok(stats(false))
}

/// Eager (no-tape) evaluation of the generator objective on one batch of
/// image pairs; used for line-search sanity checks and reporting.
pub fn eval_generator_objective(
    gen_fwd: &Generator,
    gen_bwd: &Generator,
    disc_fwd: &Discriminator,
    disc_bwd: &Discriminator,
    ref_imgs: &[ArrayD<f64>],
    site_imgs: &[ArrayD<f64>],
    lambda: f64,
) -> Result<GenStepStats> {
    if ref_imgs.is_empty() || ref_imgs.len() != site_imgs.len() {
        return Err(IguaneError::Data(
            "objective evaluation needs matched non-empty batches".into(),
        ));
    }
    fn l1_mean(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let n = a.len() as f64;
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
    }
    let w = 1.0 / ref_imgs.len() as f64;
    let (mut adv, mut cyc, mut id) = (0.0, 0.0, 0.0);
    for (r, s) in ref_imgs.iter().zip(site_imgs) {
        let fake_ref = gen_fwd.forward(s)?;
        let fake_site = gen_bwd.forward(r)?;
        adv += w * super::losses::adversarial_loss(&disc_fwd.forward(&fake_ref)?, 1.0);
        adv += w * super::losses::adversarial_loss(&disc_bwd.forward(&fake_site)?, 1.0);
        cyc += w * l1_mean(&gen_bwd.forward(&fake_ref)?, s);
        cyc += w * l1_mean(&gen_fwd.forward(&fake_site)?, r);
        id += w * l1_mean(&gen_fwd.forward(r)?, r);
        id += w * l1_mean(&gen_bwd.forward(s)?, s);
    }
    Ok(GenStepStats {
        adversarial: adv,
        cycle: cyc,
        identity: id,
        objective: super::losses::generator_objective(adv, cyc, id, lambda),
        skipped: false,
    })
}

// ======================================================================
// Trainer
// ======================================================================

/// Owns the networks, optimizer states and sampling plans for one run and
/// exposes the site-step pieces individually (the full loop is
/// [`train`]).
pub struct Trainer<'a> {
    pub config: TrainingConfig,
    pub data: &'a TrainData,
    pub bundle: ModelBundle,
    pub plans: Vec<SamplingPlan>,
    adam_gen_fwd: Adam,
    adam_gen_bwd: Vec<Adam>,
    adam_disc_fwd: Vec<Adam>,
    adam_disc_bwd: Vec<Adam>,
    site_steps_done: u64,
    total_site_steps: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainingConfig, data: &'a TrainData) -> Result<Trainer<'a>> {
        config.validate()?;
        data.validate_for(&config.generator)?;
        let site_ids: Vec<String> = data.sources.iter().map(|s| s.site_id.clone()).collect();
        let bundle = ModelBundle::new(config, &data.reference.site_id, &site_ids)?;
        let ref_ages = data.reference.ages();
        let mut plans = Vec::new();
        for site in &data.sources {
            let plan = if config.ablation.uniform_sampling() {
                SamplingPlan::uniform(site.images.len(), default_bin_edges())?
            } else {
                compute_sampling_weights(&site.ages(), &ref_ages, &default_bin_edges())?
            };
            plans.push(plan);
        }
        let n = site_ids.len();
        let n_disc_fwd = bundle.disc_fwd.len();
        let adam = || Adam::new(config.adam_beta1, config.adam_beta2);
        let total_site_steps =
            (config.n_epochs * config.steps_per_epoch * n) as u64;
        Ok(Trainer {
            config: config.clone(),
            data,
            bundle,
            plans,
            adam_gen_fwd: adam(),
            adam_gen_bwd: (0..n).map(|_| adam()).collect(),
            adam_disc_fwd: (0..n_disc_fwd).map(|_| adam()).collect(),
            adam_disc_bwd: (0..n).map(|_| adam()).collect(),
            site_steps_done: 0,
            total_site_steps,
        })
    }

    pub fn site_steps_done(&self) -> u64 {
        self.site_steps_done
    }

    pub fn total_site_steps(&self) -> u64 {
        self.total_site_steps
    }

    /// Learning rate for the next update under the linear decay schedule.
    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.site_steps_done,
            self.total_site_steps,
            self.config.lr_start,
            self.config.lr_end,
        )
    }

    /// Draws one source-site image (via the site's sampling plan) and
    /// augments it.
    fn draw_site_image<R: Rng>(&self, site_index: usize, rng: &mut R) -> Result<Volume> {
        let images = &self.data.sources[site_index].images;
        let idx = self.plans[site_index].draw(rng);
        augment(&images[idx].volume, &self.config.augmentation, rng)
    }

    /// Draws one reference-site image (uniformly) and augments it.
    fn draw_reference_image<R: Rng>(&self, rng: &mut R) -> Result<Volume> {
        let images = &self.data.reference.images;
        let idx = rng.gen_range(0..images.len());
        augment(&images[idx].volume, &self.config.augmentation, rng)
    }

    /// Part (a) of a site-step: update the forward discriminator for
    /// `site_index` on reference reals versus forward-generator fakes.
    pub fn discriminator_forward_update<R: Rng>(
        &mut self,
        site_index: usize,
        rng: &mut R,
    ) -> Result<(f64, bool)> {
        self.check_site(site_index)?;
        let mut fakes = Vec::with_capacity(self.config.disc_batch);
        for _ in 0..self.config.disc_batch {
            let aug = self.draw_site_image(site_index, rng)?;
            fakes.push(self.bundle.gen_fwd.forward(&net_input(&aug))?);
        }
        let mut reals = Vec::with_capacity(self.config.disc_batch);
        for _ in 0..self.config.disc_batch {
            reals.push(net_input(&self.draw_reference_image(rng)?));
        }
        let di = self.bundle.disc_fwd_index(site_index);
        let lr = self.current_lr();
        disc_update(
            &mut self.bundle.disc_fwd[di],
            &mut self.adam_disc_fwd[di],
            &reals,
            &fakes,
            lr,
            self.config.mixed_precision,
            self.config.loss_scale,
        )
    }

    /// Part (b): update the backward discriminator for `site_index` on
    /// site reals versus backward-generator fakes.
    pub fn discriminator_backward_update<R: Rng>(
        &mut self,
        site_index: usize,
        rng: &mut R,
    ) -> Result<(f64, bool)> {
        self.check_site(site_index)?;
        let mut fakes = Vec::with_capacity(self.config.disc_batch);
        for _ in 0..self.config.disc_batch {
            let aug = self.draw_reference_image(rng)?;
            fakes.push(self.bundle.gen_bwd[site_index].forward(&net_input(&aug))?);
        }
        let mut reals = Vec::with_capacity(self.config.disc_batch);
        for _ in 0..self.config.disc_batch {
            reals.push(net_input(&self.draw_site_image(site_index, rng)?));
        }
        let lr = self.current_lr();
        disc_update(
            &mut self.bundle.disc_bwd[site_index],
            &mut self.adam_disc_bwd[site_index],
            &reals,
            &fakes,
            lr,
            self.config.mixed_precision,
            self.config.loss_scale,
        )
    }

    /// Part (c): the joint generator update on freshly drawn batches.
    pub fn generator_joint_update<R: Rng>(
        &mut self,
        site_index: usize,
        rng: &mut R,
    ) -> Result<GenStepStats> {
        self.check_site(site_index)?;
        let mut refs = Vec::with_capacity(self.config.gen_batch);
        let mut sites = Vec::with_capacity(self.config.gen_batch);
        for _ in 0..self.config.gen_batch {
            refs.push(net_input(&self.draw_reference_image(rng)?));
            sites.push(net_input(&self.draw_site_image(site_index, rng)?));
        }
        let di = self.bundle.disc_fwd_index(site_index);
        let lr = self.current_lr();
        gen_joint_update(
            &mut self.bundle.gen_fwd,
            &mut self.bundle.gen_bwd[site_index],
            &self.bundle.disc_fwd[di],
            &self.bundle.disc_bwd[site_index],
            &mut self.adam_gen_fwd,
            &mut self.adam_gen_bwd[site_index],
            &refs,
            &sites,
            self.config.lambda_cyc,
            lr,
            self.config.mixed_precision,
            self.config.loss_scale,
        )
    }

    /// One full site-step: discriminator updates (a) and (b), then the
    /// joint generator update (c). Advances the learning-rate schedule.
    pub fn train_step<R: Rng>(&mut self, site_index: usize, rng: &mut R) -> Result<LogRecord> {
        let lr = self.current_lr();
        let (disc_fwd_loss, skip_a) = self.discriminator_forward_update(site_index, rng)?;
        let (disc_bwd_loss, skip_b) = self.discriminator_backward_update(site_index, rng)?;
        let gen = self.generator_joint_update(site_index, rng)?;
        let per_epoch = (self.config.steps_per_epoch * self.bundle.n_source_sites()) as u64;
        let epoch = (self.site_steps_done / per_epoch + 1) as usize;
        let step = (self.site_steps_done % per_epoch / self.bundle.n_source_sites() as u64 + 1)
            as usize;
        self.site_steps_done += 1;
        Ok(LogRecord::SiteStep {
            epoch,
            step,
            site_id: self.data.sources[site_index].site_id.clone(),
            lr,
            disc_fwd_loss,
            disc_bwd_loss,
            adversarial: gen.adversarial,
            cycle: gen.cycle,
            identity: gen.identity,
            objective: gen.objective,
            skipped: skip_a || skip_b || gen.skipped,
        })
    }

    fn check_site(&self, site_index: usize) -> Result<()> {
        if site_index >= self.data.sources.len() {
            return Err(IguaneError::Data(format!(
                "site index {site_index} out of range ({} sources)",
                self.data.sources.len()
            )));
        }
        if self.data.sources[site_index].images.is_empty()
            || self.data.reference.images.is_empty()
        {
            return Err(IguaneError::Data(
                "cannot train on an empty site image stream".into(),
            ));
        }
        Ok(())
    }
}

// ======================================================================
// Validation
// ======================================================================

/// Validation metrics of one checkpointed state.
#[derive(Debug, Clone, Copy)]
pub struct ValidationResult {
    pub r_squared: f64,
    pub accuracy: f64,
    pub score: f64,
}

/// Combined validation score: `w_r2 * r2 + w_acc * accuracy`.
pub fn validation_score(weights: [f64; 2], r_squared: f64, accuracy: f64) -> f64 {
    weights[0] * r_squared + weights[1] * accuracy
}

/// Harmonizes every holdout image with the bundle's forward generator and
/// scores the pretrained predictors on the results.
pub fn validate(
    bundle: &ModelBundle,
    holdout: &[TrainImage],
    age_predictor: &Predictor,
    sex_predictor: &Predictor,
    weights: [f64; 2],
) -> Result<ValidationResult> {
    if holdout.is_empty() {
        return Err(IguaneError::Validation(
            "validation holdout is empty".into(),
        ));
    }
    let mut ages_true = Vec::with_capacity(holdout.len());
    let mut ages_pred = Vec::with_capacity(holdout.len());
    let mut n_correct = 0usize;
    for img in holdout {
        let harmonized = bundle.harmonize(&img.volume)?;
        let x = net_input(&harmonized);
        ages_true.push(img.age);
        ages_pred.push(denormalize_age(age_predictor.predict(&x)?));
        let p_male = sex_predictor.predict(&x)?;
        let said_male = p_male >= 0.5;
        if said_male == (img.sex == Sex::M) {
            n_correct += 1;
        }
    }
    let r_squared = crate::stats::r2_score(&ages_true, &ages_pred)?;
    let accuracy = n_correct as f64 / holdout.len() as f64;
    Ok(ValidationResult {
        r_squared,
        accuracy,
        score: validation_score(weights, r_squared, accuracy),
    })
}

/// Trains the age (linear head) and sex (logistic head) predictors on
/// reference-site images. These run before adversarial training and stay
/// frozen throughout; classic Adam betas (0.9, 0.999) and a constant
/// learning rate.
pub fn pretrain_predictors(
    config: &TrainingConfig,
    images: &[TrainImage],
) -> Result<(Predictor, Predictor)> {
    if images.is_empty() {
        return Err(IguaneError::Data(
            "predictor pretraining needs at least one reference image".into(),
        ));
    }
    let age_spec = PredictorSpec {
        head: PredictorHead::Linear,
        ..config.predictor.clone()
    };
    let sex_spec = PredictorSpec {
        head: PredictorHead::Logistic,
        ..config.predictor.clone()
    };
    let mut age = Predictor::new(age_spec, &mut stream_rng(config.seed, "init/predictor-age"))?;
    let mut sex = Predictor::new(sex_spec, &mut stream_rng(config.seed, "init/predictor-sex"))?;
    let mut adam_age = Adam::new(0.9, 0.999);
    let mut adam_sex = Adam::new(0.9, 0.999);
    let mut rng = stream_rng(config.seed, "predictor-pretrain");
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..config.predictor_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let img = &images[i];
            let aug = augment(&img.volume, &config.augmentation, &mut rng)?;
            let x = net_input(&aug);
            // Age regression step.
            {
                let tape = Tape::new();
                let bound = BoundParams::bind(&tape, &age.params, true);
                let xv = tape.leaf(x.clone(), false);
                let pred = {
                    let mut be = TapeBackend {
                        tape: &tape,
                        params: &bound,
                    };
                    age.run(&mut be, &xv)?
                };
                let loss = tape.mse_to(pred, normalize_age(img.age));
                let loss_val = tape.value(loss)[[0]];
                if !loss_val.is_finite() {
                    return Err(IguaneError::State(
                        "non-finite age predictor loss".into(),
                    ));
                }
                let grads = tape.backward(loss)?;
                let gmap = collect_grads(&bound, &grads);
                adam_age.step(&mut age.params, &gmap, config.predictor_lr)?;
            }
            // Sex classification step on the same augmented image.
            {
                let tape = Tape::new();
                let bound = BoundParams::bind(&tape, &sex.params, true);
                let xv = tape.leaf(x.clone(), false);
                let logit = {
                    let mut be = TapeBackend {
                        tape: &tape,
                        params: &bound,
                    };
                    sex.run(&mut be, &xv)?
                };
                let target = if img.sex == Sex::M { 1.0 } else { 0.0 };
                let loss = tape.bce_logit(logit, target);
                let loss_val = tape.value(loss)[[0]];
                if !loss_val.is_finite() {
                    return Err(IguaneError::State(
                        "non-finite sex predictor loss".into(),
                    ));
                }
                let grads = tape.backward(loss)?;
                let gmap = collect_grads(&bound, &grads);
                adam_sex.step(&mut sex.params, &gmap, config.predictor_lr)?;
            }
        }
    }
    ensure_finite_params("age predictor", &age.params)?;
    ensure_finite_params("sex predictor", &sex.params)?;
    Ok((age, sex))
}

// ======================================================================
// The full loop
// ======================================================================

/// Output of a full training run: the bundle (with the best validation
/// snapshot installed in its generators) plus the complete log.
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LogRecord>,
}

/// Runs the complete schedule: `n_epochs x steps_per_epoch` steps, each
/// iterating all source sites in random order, with validation every
/// `validation_every` epochs against `holdout`. The returned bundle
/// carries the best-scoring generator snapshot (ties broken by the later
/// epoch). An empty holdout skips validation and returns the final state.
pub fn train(
    config: &TrainingConfig,
    data: &TrainData,
    holdout: &[TrainImage],
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    let n_sites = data.sources.len();
    let predictors = if holdout.is_empty() {
        None
    } else {
        for img in holdout {
            if img.volume.space != Space::ModelSpace {
                return Err(IguaneError::State(format!(
                    "holdout image `{}` is in {:?} space, expected ModelSpace",
                    img.subject_id, img.volume.space
                )));
            }
        }
        Some(pretrain_predictors(config, &data.reference.images)?)
    };
    let mut rng = stream_rng(config.seed, "train");
    let mut log: Vec<LogRecord> = Vec::new();
    // Best snapshot: (score, epoch, gen_fwd params, gen_bwd params).
    let mut best: Option<(f64, usize, ParamSet, Vec<ParamSet>)> = None;
    let mut site_order: Vec<usize> = (0..n_sites).collect();
    for epoch in 1..=config.n_epochs {
        for _step in 0..config.steps_per_epoch {
            site_order.shuffle(&mut rng);
            for &site in &site_order {
                log.push(trainer.train_step(site, &mut rng)?);
            }
        }
        if epoch % config.validation_every == 0 {
            if let Some((age_pred, sex_pred)) = &predictors {
                let result = validate(
                    &trainer.bundle,
                    holdout,
                    age_pred,
                    sex_pred,
                    config.validation_metric_weights,
                )?;
                // >= so equal scores prefer the later (more trained) epoch.
                let is_best = best
                    .as_ref()
                    .is_none_or(|(s, _, _, _)| result.score >= *s);
                if is_best {
                    best = Some((
                        result.score,
                        epoch,
                        trainer.bundle.gen_fwd.params.clone(),
                        trainer
                            .bundle
                            .gen_bwd
                            .iter()
                            .map(|g| g.params.clone())
                            .collect(),
                    ));
                }
                log.push(LogRecord::Validation {
                    epoch,
                    r_squared: result.r_squared,
                    accuracy: result.accuracy,
                    score: result.score,
                    is_best,
                });
            }
        }
    }
    let mut bundle = trainer.bundle;
    if let Some((score, epoch, gen_fwd_params, gen_bwd_params)) = best {
        bundle.gen_fwd.params = gen_fwd_params;
        for (g, p) in bundle.gen_bwd.iter_mut().zip(gen_bwd_params) {
            g.params = p;
        }
        bundle.best_validation_score = Some(score);
        bundle.best_epoch = Some(epoch);
    }
    Ok(TrainOutcome { bundle, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::augment::AugmentParams;

    // ------------------------------------------------------------------
    // Fixtures: tiny synthetic model-space cohorts and tiny networks.
    // ------------------------------------------------------------------

    fn tiny_volume(dims: (usize, usize, usize), bias: f64, wiggle: f64) -> Volume {
        let mut data = Array3::from_elem(dims, -1.0);
        let mut mask = Array3::from_elem(dims, false);
        let c = (
            dims.0 as f64 / 2.0 - 0.5,
            dims.1 as f64 / 2.0 - 0.5,
            dims.2 as f64 / 2.0 - 0.5,
        );
        let r = dims.0.min(dims.1).min(dims.2) as f64 / 2.0 - 1.0;
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    let d2 = (x as f64 - c.0).powi(2)
                        + (y as f64 - c.1).powi(2)
                        + (z as f64 - c.2).powi(2);
                    if d2 <= r * r {
                        let tex = wiggle
                            * ((x as f64 * 1.3).sin()
                                + (y as f64 * 0.7).cos()
                                + (z as f64 * 2.1).sin())
                            / 3.0;
                        data[(x, y, z)] = (bias + tex).clamp(-0.95, 0.95);
                        mask[(x, y, z)] = true;
                    }
                }
            }
        }
        Volume::new(data, mask, [1.0, 1.0, 1.0], Space::ModelSpace).unwrap()
    }

    fn tiny_image(id: &str, age: f64, sex: Sex, bias: f64) -> TrainImage {
        TrainImage {
            subject_id: id.to_string(),
            age,
            sex,
            volume: tiny_volume((8, 8, 8), bias, 0.1),
        }
    }

    fn tiny_site(site_id: &str, bias: f64, n: usize) -> SiteSet {
        // A small site-dependent age offset keeps holdout ages
        // non-degenerate (images drawn from the same position of
        // different sites must not share one age) while staying inside
        // the same 5-year sampling bins at every site.
        let site_off = (site_id.bytes().map(u64::from).sum::<u64>() % 7) as f64 * 0.15;
        let images = (0..n)
            .map(|i| {
                let age = 25.0 + site_off + 50.0 * i as f64 / n.max(2) as f64;
                let sex = if i % 2 == 0 { Sex::M } else { Sex::F };
                tiny_image(&format!("{site_id}_s{i}"), age, sex, bias + 0.02 * i as f64)
            })
            .collect();
        SiteSet {
            site_id: site_id.to_string(),
            images,
        }
    }

    fn tiny_data(n_sources: usize, per_site: usize) -> TrainData {
        let biases = [-0.3, 0.35, 0.0, -0.1];
        TrainData {
            reference: tiny_site("ref", 0.1, per_site),
            sources: (0..n_sources)
                .map(|i| tiny_site(&format!("src{i}"), biases[i % biases.len()], per_site))
                .collect(),
        }
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            n_epochs: 1,
            steps_per_epoch: 1,
            gen_batch: 1,
            disc_batch: 1,
            validation_every: 1,
            predictor_epochs: 2,
            generator: GeneratorSpec {
                in_channels: 1,
                base: 2,
                levels: 2,
                kernel: 3,
            },
            discriminator: DiscriminatorSpec {
                in_channels: 1,
                base: 2,
                levels: 2,
            },
            predictor: PredictorSpec {
                in_channels: 1,
                base: 2,
                levels: 2,
                head: PredictorHead::Linear,
            },
            augmentation: AugmentParams {
                max_translation: 1,
                max_rotation_deg: 5.0,
                rotation_prob: 0.25,
            },
            seed: 11,
            ..TrainingConfig::default()
        }
    }

    fn no_augment(mut cfg: TrainingConfig) -> TrainingConfig {
        cfg.augmentation = AugmentParams {
            max_translation: 0,
            max_rotation_deg: 0.0,
            rotation_prob: 0.0,
        };
        cfg
    }

    fn params_bits(p: &ParamSet) -> Vec<(String, Vec<u64>)> {
        p.iter()
            .map(|(n, a)| (n.to_string(), a.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    // ------------------------------------------------------------------
    // Configuration validation
    // ------------------------------------------------------------------

    #[test]
    fn config_validation_catches_inconsistencies() {
        let mut cfg = tiny_config();
        cfg.lambda_id = 10.0; // != lambda_cyc / 2 = 15
        assert!(matches!(cfg.validate(), Err(IguaneError::Config(_))));
        let data = tiny_data(1, 2);
        // train() must fail before any compute.
        assert!(train(&cfg, &data, &[]).is_err());

        let mut cfg = tiny_config();
        cfg.n_epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.lr_start = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.validation_metric_weights = [0.0, 0.0];
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn default_config_matches_published_schedule() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.n_epochs, 100);
        assert_eq!(cfg.steps_per_epoch, 200);
        assert_eq!(cfg.gen_batch, 1);
        assert_eq!(cfg.disc_batch, 2);
        assert_eq!(cfg.lr_start, 2e-4);
        assert_eq!(cfg.lr_end, 2e-5);
        assert_eq!(cfg.lambda_cyc, 30.0);
        assert_eq!(cfg.lambda_id, 15.0);
        assert_eq!(cfg.validation_every, 5);
        assert_eq!(cfg.validation_metric_weights, [0.75, 0.25]);
        assert_eq!(cfg.adam_beta1, 0.5);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert!(cfg.validate().is_ok());
    }

    // ------------------------------------------------------------------
    // Data plumbing
    // ------------------------------------------------------------------

    #[test]
    fn split_holdout_takes_site_tails() {
        let mut data = tiny_data(2, 3);
        let holdout = data.split_holdout(1).unwrap();
        assert_eq!(holdout.len(), 2);
        assert_eq!(data.sources[0].images.len(), 2);
        assert_eq!(holdout[0].subject_id, "src0_s2");
        assert_eq!(holdout[1].subject_id, "src1_s2");
        // Cannot empty a site.
        let mut data = tiny_data(1, 2);
        assert!(matches!(
            data.split_holdout(2),
            Err(IguaneError::Data(_))
        ));
    }

    #[test]
    fn validate_for_rejects_misaligned_and_wrong_space() {
        let cfg = tiny_config();
        let mut data = tiny_data(1, 2);
        data.sources[0].images[0].volume = tiny_volume((7, 8, 8), 0.0, 0.1); // 7 % 4 != 0
        assert!(matches!(
            data.validate_for(&cfg.generator),
            Err(IguaneError::Shape(_))
        ));
        let mut data = tiny_data(1, 2);
        data.reference.images[0].volume.space = Space::Preprocessed;
        assert!(matches!(
            data.validate_for(&cfg.generator),
            Err(IguaneError::State(_))
        ));
    }

    #[test]
    fn manifest_loading_groups_sites_and_normalizes() {
        use crate::manifest::ImageRecord;
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for (site, subject, med) in [
            ("sa", "sa_1", 400.0),
            ("sa", "sa_2", 600.0),
            ("ref", "r_1", 500.0),
        ] {
            // Raw-space image whose brain median is `med`.
            let mut data = Array3::from_elem((8, 8, 8), 0.0);
            let mut mask = Array3::from_elem((8, 8, 8), false);
            for x in 2..6 {
                for y in 2..6 {
                    for z in 2..6 {
                        data[(x, y, z)] = med + (x as f64 - 4.0) * 10.0;
                        mask[(x, y, z)] = true;
                    }
                }
            }
            let vol = Volume::new(data, mask, [1.0, 1.0, 1.0], Space::Raw).unwrap();
            let path = dir.path().join(format!("{subject}.nii.gz"));
            crate::volume::save_volume(&vol, &path).unwrap();
            records.push(ImageRecord {
                path: std::path::PathBuf::from(format!("{subject}.nii.gz")),
                subject_id: subject.to_string(),
                site_id: site.to_string(),
                age: 50.0,
                sex: Sex::F,
                diagnosis: "CN".to_string(),
            });
        }
        let manifest = Manifest::new(records, dir.path().to_path_buf());
        let data = TrainData::from_manifest(&manifest, "ref").unwrap();
        assert_eq!(data.reference.site_id, "ref");
        assert_eq!(data.reference.images.len(), 1);
        assert_eq!(data.sources.len(), 1);
        assert_eq!(data.sources[0].images.len(), 2);
        // Model space: brain median maps to 500 then to 0.0; background -1.
        for img in data.reference.images.iter().chain(&data.sources[0].images) {
            assert_eq!(img.volume.space, Space::ModelSpace);
            let med = img.volume.brain_median().unwrap();
            assert!(med.abs() < 1e-12, "brain median {med} should be 0");
        }
        // Missing reference site errors.
        assert!(TrainData::from_manifest(&manifest, "nope").is_err());
    }

    // ------------------------------------------------------------------
    // Site-step mechanics
    // ------------------------------------------------------------------

    #[test]
    fn train_step_touches_exactly_the_right_networks() {
        let cfg = tiny_config();
        let data = tiny_data(2, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let before_gen_fwd = params_bits(&trainer.bundle.gen_fwd.params);
        let before_gen_bwd1 = params_bits(&trainer.bundle.gen_bwd[1].params);
        let before_disc_fwd1 = params_bits(&trainer.bundle.disc_fwd[1].params);
        let before_disc_bwd1 = params_bits(&trainer.bundle.disc_bwd[1].params);
        let mut rng = stream_rng(3, "step-test");
        let rec = trainer.train_step(0, &mut rng).unwrap();
        // Site 0's networks and the shared forward generator moved...
        assert_ne!(params_bits(&trainer.bundle.gen_fwd.params), before_gen_fwd);
        // ...while site 1's networks are untouched.
        assert_eq!(
            params_bits(&trainer.bundle.gen_bwd[1].params),
            before_gen_bwd1
        );
        assert_eq!(
            params_bits(&trainer.bundle.disc_fwd[1].params),
            before_disc_fwd1
        );
        assert_eq!(
            params_bits(&trainer.bundle.disc_bwd[1].params),
            before_disc_bwd1
        );
        match rec {
            LogRecord::SiteStep {
                site_id,
                disc_fwd_loss,
                disc_bwd_loss,
                objective,
                skipped,
                ..
            } => {
                assert_eq!(site_id, "src0");
                assert!(disc_fwd_loss.is_finite());
                assert!(disc_bwd_loss.is_finite());
                assert!(objective.is_finite());
                assert!(!skipped);
            }
            _ => panic!("expected a site-step record"),
        }
        assert_eq!(trainer.site_steps_done(), 1);
    }

    #[test]
    fn generator_update_leaves_discriminators_untouched() {
        let cfg = no_augment(tiny_config());
        let data = tiny_data(1, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let disc_fwd_before = params_bits(&trainer.bundle.disc_fwd[0].params);
        let disc_bwd_before = params_bits(&trainer.bundle.disc_bwd[0].params);
        let mut rng = stream_rng(4, "gen-isolation");
        let stats = trainer.generator_joint_update(0, &mut rng).unwrap();
        assert!(!stats.skipped);
        assert!(stats.objective.is_finite());
        // Bitwise identical: step (c) cannot touch discriminator weights.
        assert_eq!(params_bits(&trainer.bundle.disc_fwd[0].params), disc_fwd_before);
        assert_eq!(params_bits(&trainer.bundle.disc_bwd[0].params), disc_bwd_before);
    }

    #[test]
    fn discriminator_update_leaves_generators_untouched() {
        let cfg = tiny_config();
        let data = tiny_data(1, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let gen_fwd_before = params_bits(&trainer.bundle.gen_fwd.params);
        let gen_bwd_before = params_bits(&trainer.bundle.gen_bwd[0].params);
        let mut rng = stream_rng(5, "disc-isolation");
        let (loss_a, _) = trainer.discriminator_forward_update(0, &mut rng).unwrap();
        let (loss_b, _) = trainer.discriminator_backward_update(0, &mut rng).unwrap();
        assert!(loss_a.is_finite() && loss_b.is_finite());
        assert_eq!(params_bits(&trainer.bundle.gen_fwd.params), gen_fwd_before);
        assert_eq!(params_bits(&trainer.bundle.gen_bwd[0].params), gen_bwd_before);
    }

    #[test]
    fn fresh_generator_objective_reflects_identity_initialization() {
        // At initialization both generators are exact identities, so cycle
        // and identity losses start at zero.
        let cfg = no_augment(tiny_config());
        let data = tiny_data(1, 2);
        let trainer = Trainer::new(&cfg, &data).unwrap();
        let r = net_input(&data.reference.images[0].volume);
        let s = net_input(&data.sources[0].images[0].volume);
        let stats = eval_generator_objective(
            &trainer.bundle.gen_fwd,
            &trainer.bundle.gen_bwd[0],
            &trainer.bundle.disc_fwd[0],
            &trainer.bundle.disc_bwd[0],
            &[r],
            &[s],
            cfg.lambda_cyc,
        )
        .unwrap();
        assert!(stats.cycle.abs() < 1e-12, "cycle = {}", stats.cycle);
        assert!(stats.identity.abs() < 1e-12, "identity = {}", stats.identity);
        assert!(
            (stats.objective - stats.adversarial).abs() < 1e-12,
            "objective should reduce to the adversarial term at init"
        );
    }

    #[test]
    fn generator_update_descends_the_objective_at_small_lr() {
        for lr in [1e-4, 1e-5] {
            let mut cfg = no_augment(tiny_config());
            cfg.lr_start = lr;
            cfg.lr_end = lr;
            let data = tiny_data(1, 1); // single image per site: fixed batch
            let mut trainer = Trainer::new(&cfg, &data).unwrap();
            let r = net_input(&data.reference.images[0].volume);
            let s = net_input(&data.sources[0].images[0].volume);
            // Warm up with full site-steps: moves the generators off their
            // identity initialization (where the L1 terms sit on a kink
            // with zero subgradient) and gives the discriminators signal.
            let mut rng = stream_rng(6, "line-search");
            for _ in 0..2 {
                trainer.train_step(0, &mut rng).unwrap();
            }
            let eval = |t: &Trainer| {
                eval_generator_objective(
                    &t.bundle.gen_fwd,
                    &t.bundle.gen_bwd[0],
                    &t.bundle.disc_fwd[0],
                    &t.bundle.disc_bwd[0],
                    std::slice::from_ref(&r),
                    std::slice::from_ref(&s),
                    cfg.lambda_cyc,
                )
                .unwrap()
                .objective
            };
            // generator_joint_update leaves the discriminators untouched,
            // so before/after evaluate the same objective function.
            let before = eval(&trainer);
            trainer.generator_joint_update(0, &mut rng).unwrap();
            let after = eval(&trainer);
            assert!(
                after < before,
                "objective should decrease at lr={lr}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn lambda_scales_the_fidelity_gradient_exactly() {
        // On real loss towers from a warm (off-identity) state, the
        // gradient of adv + lambda * fidelity must decompose exactly into
        // grad(adv) + lambda * grad(fidelity) for every generator
        // parameter, with a nonzero fidelity part.
        let cfg = no_augment(tiny_config());
        let data = tiny_data(1, 1);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let mut rng = stream_rng(21, "lambda-decompose");
        for _ in 0..3 {
            trainer.train_step(0, &mut rng).unwrap();
        }
        let r = net_input(&data.reference.images[0].volume);
        let s = net_input(&data.sources[0].images[0].volume);
        let lambda = 30.0;

        let tape = Tape::new();
        let b_gf = BoundParams::bind(&tape, &trainer.bundle.gen_fwd.params, true);
        let b_gb = BoundParams::bind(&tape, &trainer.bundle.gen_bwd[0].params, true);
        let b_df = BoundParams::bind(&tape, &trainer.bundle.disc_fwd[0].params, false);
        let b_db = BoundParams::bind(&tape, &trainer.bundle.disc_bwd[0].params, false);
        let mut be_gf = TapeBackend { tape: &tape, params: &b_gf };
        let mut be_gb = TapeBackend { tape: &tape, params: &b_gb };
        let mut be_df = TapeBackend { tape: &tape, params: &b_df };
        let mut be_db = TapeBackend { tape: &tape, params: &b_db };
        let xr = tape.leaf(r.clone(), false);
        let xs = tape.leaf(s.clone(), false);
        let fake_ref = trainer.bundle.gen_fwd.run(&mut be_gf, &xs).unwrap();
        let fake_site = trainer.bundle.gen_bwd[0].run(&mut be_gb, &xr).unwrap();
        let adv_f = tape.mse_to(trainer.bundle.disc_fwd[0].run(&mut be_df, &fake_ref).unwrap(), 1.0);
        let adv_b = tape.mse_to(trainer.bundle.disc_bwd[0].run(&mut be_db, &fake_site).unwrap(), 1.0);
        let cyc_s = tape
            .l1_diff_mean(trainer.bundle.gen_bwd[0].run(&mut be_gb, &fake_ref).unwrap(), xs)
            .unwrap();
        let cyc_r = tape
            .l1_diff_mean(trainer.bundle.gen_fwd.run(&mut be_gf, &fake_site).unwrap(), xr)
            .unwrap();
        let id_r = tape
            .l1_diff_mean(trainer.bundle.gen_fwd.run(&mut be_gf, &xr).unwrap(), xr)
            .unwrap();
        let id_s = tape
            .l1_diff_mean(trainer.bundle.gen_bwd[0].run(&mut be_gb, &xs).unwrap(), xs)
            .unwrap();
        let adv = tape.sum_weighted(&[(1.0, adv_f), (1.0, adv_b)]).unwrap();
        let fid = tape
            .sum_weighted(&[(1.0, cyc_s), (1.0, cyc_r), (0.5, id_r), (0.5, id_s)])
            .unwrap();
        let total = tape.sum_weighted(&[(1.0, adv), (lambda, fid)]).unwrap();
        let g_adv = tape.backward(adv).unwrap();
        let g_fid = tape.backward(fid).unwrap();
        let g_tot = tape.backward(total).unwrap();

        let mut fid_norm = 0.0;
        for bound in [&b_gf, &b_gb] {
            for (name, var) in &bound.vars {
                let shape = tape.value(*var).shape().to_vec();
                let zeros = ArrayD::zeros(ndarray::IxDyn(&shape));
                let ga = g_adv.get(*var).cloned().unwrap_or_else(|| zeros.clone());
                let gf = g_fid.get(*var).cloned().unwrap_or_else(|| zeros.clone());
                let gt = g_tot.get(*var).cloned().unwrap_or(zeros);
                for ((t, a), f) in gt.iter().zip(ga.iter()).zip(gf.iter()) {
                    let expect = a + lambda * f;
                    let tol = 1e-9 * (1.0 + a.abs() + lambda * f.abs());
                    assert!(
                        (t - expect).abs() <= tol,
                        "gradient of `{name}` does not decompose: {t} vs {expect}"
                    );
                    fid_norm += f.abs();
                }
            }
        }
        assert!(fid_norm > 0.0, "fidelity gradient must be nonzero off identity");
    }

    #[test]
    fn lambda_reaches_the_generator_updates() {
        // Two trainings identical except for lambda must diverge once the
        // generators are off the identity (step 1 leaves them at the
        // identity where the fidelity gradient is zero, so divergence
        // appears at step 2).
        let run = |lambda: f64| {
            let mut cfg = no_augment(tiny_config());
            cfg.lambda_cyc = lambda;
            cfg.lambda_id = lambda / 2.0;
            cfg.n_epochs = 1;
            cfg.steps_per_epoch = 2;
            let data = tiny_data(1, 1);
            let out = train(&cfg, &data, &[]).unwrap();
            params_bits(&out.bundle.gen_fwd.params)
        };
        assert_ne!(run(30.0), run(60.0), "lambda must influence the updates");

        // And a short training run at lambda = 1e4 stays pinned near the
        // identity map.
        let mut cfg_huge = no_augment(tiny_config());
        cfg_huge.lambda_cyc = 1e4;
        cfg_huge.lambda_id = 5e3;
        cfg_huge.n_epochs = 1;
        cfg_huge.steps_per_epoch = 4;
        let data4 = tiny_data(1, 2);
        let out = train(&cfg_huge, &data4, &[]).unwrap();
        let probe = &data4.sources[0].images[0].volume;
        let harmonized = out.bundle.harmonize(probe).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        ndarray::Zip::from(&harmonized.data)
            .and(&probe.data)
            .and(&probe.mask)
            .for_each(|&a, &b, &m| {
                if m {
                    sum += (a - b).abs();
                    n += 1.0;
                }
            });
        let dev = sum / n;
        assert!(dev < 0.05, "huge lambda should pin near identity, got {dev}");
    }

    // ------------------------------------------------------------------
    // Learning-rate schedule
    // ------------------------------------------------------------------

    #[test]
    fn trainer_lr_follows_linear_decay() {
        let mut cfg = tiny_config();
        cfg.n_epochs = 2;
        cfg.steps_per_epoch = 5;
        let data = tiny_data(2, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        assert_eq!(trainer.total_site_steps(), 2 * 5 * 2);
        assert_eq!(trainer.current_lr(), cfg.lr_start);
        let mut rng = stream_rng(7, "lr-walk");
        trainer.train_step(0, &mut rng).unwrap();
        let expected = lr_at(1, 20, cfg.lr_start, cfg.lr_end);
        assert!((trainer.current_lr() - expected).abs() < 1e-18);
    }

    // ------------------------------------------------------------------
    // Ablations
    // ------------------------------------------------------------------

    #[test]
    fn ablations_shape_discriminators_and_plans() {
        let data = tiny_data(3, 2);

        let full = Trainer::new(&tiny_config(), &data).unwrap();
        assert_eq!(full.bundle.disc_fwd.len(), 3);
        assert_eq!(full.bundle.disc_bwd.len(), 3);
        assert_eq!(full.bundle.disc_fwd_index(2), 2);

        let mut cfg = tiny_config();
        cfg.ablation = Ablation::SingleFwdDisc;
        let single = Trainer::new(&cfg, &data).unwrap();
        assert_eq!(single.bundle.disc_fwd.len(), 1);
        assert_eq!(single.bundle.disc_bwd.len(), 3);
        assert_eq!(single.bundle.disc_fwd_index(2), 0);

        let mut cfg = tiny_config();
        cfg.ablation = Ablation::SingleFwdDiscUniformSampling;
        let uniform = Trainer::new(&cfg, &data).unwrap();
        assert_eq!(uniform.bundle.disc_fwd.len(), 1);
        for plan in &uniform.plans {
            let w0 = plan.weights[0];
            assert!(plan.weights.iter().all(|&w| w == w0), "uniform plan");
        }
    }

    #[test]
    fn shared_discriminator_learns_from_every_site() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::SingleFwdDisc;
        let data = tiny_data(2, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let mut rng = stream_rng(9, "shared-disc");
        let before = params_bits(&trainer.bundle.disc_fwd[0].params);
        trainer.discriminator_forward_update(1, &mut rng).unwrap();
        // Updating via site 1 moved the single shared discriminator.
        assert_ne!(params_bits(&trainer.bundle.disc_fwd[0].params), before);
    }

    // ------------------------------------------------------------------
    // Full loop, logging, validation, snapshots
    // ------------------------------------------------------------------

    #[test]
    fn desk_run_logs_every_site_step_and_validation() {
        let mut cfg = tiny_config();
        cfg.n_epochs = 2;
        cfg.steps_per_epoch = 5;
        cfg.validation_every = 1;
        cfg.predictor_epochs = 1;
        let mut data = tiny_data(3, 3);
        let holdout = data.split_holdout(1).unwrap();
        let out = train(&cfg, &data, &holdout).unwrap();
        let site_steps: Vec<_> = out
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::SiteStep { .. }))
            .collect();
        let validations: Vec<_> = out
            .log
            .iter()
            .filter(|r| matches!(r, LogRecord::Validation { .. }))
            .collect();
        assert_eq!(site_steps.len(), 2 * 5 * 3, "site-steps = epochs*steps*sites");
        assert_eq!(validations.len(), 2, "one validation per epoch");
        // Every epoch visits each site exactly steps_per_epoch times.
        let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
        for rec in &site_steps {
            if let LogRecord::SiteStep { epoch, site_id, lr, objective, .. } = rec {
                *counts.entry((*epoch, site_id.clone())).or_default() += 1;
                assert!(lr.is_finite() && *lr > 0.0);
                assert!(objective.is_finite());
            }
        }
        for ((_epoch, _site), n) in counts {
            assert_eq!(n, 5);
        }
        // Best snapshot bookkeeping matches the validation log.
        let best_score = out.bundle.best_validation_score.unwrap();
        let max_logged = validations
            .iter()
            .filter_map(|r| match r {
                LogRecord::Validation { score, .. } => Some(*score),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_score, max_logged);
        // Ties prefer the later epoch: best_epoch is the last argmax.
        let last_argmax = validations
            .iter()
            .filter_map(|r| match r {
                LogRecord::Validation { epoch, score, .. } => Some((*epoch, *score)),
                _ => None,
            })
            .filter(|(_, s)| *s == max_logged)
            .map(|(e, _)| e)
            .max()
            .unwrap();
        assert_eq!(out.bundle.best_epoch.unwrap(), last_argmax);
    }

    #[test]
    fn log_writes_as_json_lines() {
        let records = vec![
            LogRecord::SiteStep {
                epoch: 1,
                step: 2,
                site_id: "src0".into(),
                lr: 2e-4,
                disc_fwd_loss: 0.25,
                disc_bwd_loss: 0.3,
                adversarial: 1.9,
                cycle: 0.01,
                identity: 0.005,
                objective: 2.275,
                skipped: false,
            },
            LogRecord::Validation {
                epoch: 5,
                r_squared: 0.8,
                accuracy: 0.9,
                score: 0.825,
                is_best: true,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.jsonl");
        write_log_jsonl(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["kind"], "site_step");
        assert_eq!(first["site_id"], "src0");
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["kind"], "validation");
        assert_eq!(second["score"], 0.825);
    }

    #[test]
    fn validation_score_arithmetic_matches_published_weighting() {
        let w = [0.75, 0.25];
        assert!((validation_score(w, 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((validation_score(w, 0.8, 0.9) - 0.825).abs() < 1e-12);
        assert!((validation_score(w, 0.0, 0.5) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_empty_holdout() {
        let cfg = tiny_config();
        let data = tiny_data(1, 2);
        let trainer = Trainer::new(&cfg, &data).unwrap();
        let (age, sex) = pretrain_predictors(&cfg, &data.reference.images).unwrap();
        let err = validate(&trainer.bundle, &[], &age, &sex, [0.75, 0.25]).unwrap_err();
        assert!(matches!(err, IguaneError::Validation(_)));
    }

    #[test]
    fn predictors_learn_age_and_sex_from_structural_signal() {
        // Age sets the radius of a bright inner core; sex adds a bright
        // corner block. Both are structural signals that survive the
        // predictor's instance normalization (a pure intensity offset
        // would not: instance norm is affine-invariant per channel).
        let mk = |age: f64, sex: Sex, i: usize| -> TrainImage {
            let mut data = Array3::from_elem((8, 8, 8), -1.0);
            let mut mask = Array3::from_elem((8, 8, 8), false);
            let c = 3.5;
            let r_brain = 3.2;
            let r_core = 1.0 + 2.0 * (age - 20.0) / 60.0;
            for ((x, y, z), v) in data.indexed_iter_mut() {
                let d = ((x as f64 - c).powi(2)
                    + (y as f64 - c).powi(2)
                    + (z as f64 - c).powi(2))
                .sqrt();
                if d <= r_brain {
                    mask[(x, y, z)] = true;
                    *v = if d <= r_core { 0.6 } else { -0.2 };
                }
            }
            if sex == Sex::M {
                for x in 0..2 {
                    for y in 0..2 {
                        for z in 0..2 {
                            mask[(x, y, z)] = true;
                            data[(x, y, z)] = 0.8;
                        }
                    }
                }
            }
            TrainImage {
                subject_id: format!("p{i}"),
                age,
                sex,
                volume: Volume::new(data, mask, [1.0, 1.0, 1.0], Space::ModelSpace).unwrap(),
            }
        };
        let images: Vec<TrainImage> = (0..8)
            .map(|i| {
                let age = 20.0 + 8.0 * i as f64;
                let sex = if i % 2 == 0 { Sex::M } else { Sex::F };
                mk(age, sex, i)
            })
            .collect();
        let mut cfg = no_augment(tiny_config());
        cfg.predictor = PredictorSpec {
            in_channels: 1,
            base: 4,
            levels: 2,
            head: PredictorHead::Linear,
        };
        cfg.predictor_epochs = 300;
        cfg.predictor_lr = 3e-3;
        let (age_pred, sex_pred) = pretrain_predictors(&cfg, &images).unwrap();
        let mut ages_true = Vec::new();
        let mut ages_hat = Vec::new();
        let mut correct = 0;
        for img in &images {
            let x = net_input(&img.volume);
            ages_true.push(img.age);
            ages_hat.push(denormalize_age(age_pred.predict(&x).unwrap()));
            let said_male = sex_pred.predict(&x).unwrap() >= 0.5;
            if said_male == (img.sex == Sex::M) {
                correct += 1;
            }
        }
        let r2 = crate::stats::r2_score(&ages_true, &ages_hat).unwrap();
        assert!(r2 > 0.5, "age predictor r2 = {r2}");
        assert!(correct >= 6, "sex accuracy {correct}/8");
    }

    // ------------------------------------------------------------------
    // Precision policies
    // ------------------------------------------------------------------

    #[test]
    fn full_precision_nan_poisoning_is_a_state_error() {
        let cfg = tiny_config();
        let data = tiny_data(1, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        // Poison one forward-generator weight.
        let name = trainer
            .bundle
            .gen_fwd
            .params
            .iter()
            .next()
            .map(|(n, _)| n.to_string())
            .unwrap();
        *trainer
            .bundle
            .gen_fwd
            .params
            .get_mut(&name)
            .unwrap()
            .iter_mut()
            .next()
            .unwrap() = f64::NAN;
        let mut rng = stream_rng(10, "nan-full");
        let err = trainer.train_step(0, &mut rng).unwrap_err();
        assert!(matches!(err, IguaneError::State(_)), "got {err:?}");
    }

    #[test]
    fn mixed_precision_skips_poisoned_updates_without_erroring() {
        let mut cfg = tiny_config();
        cfg.mixed_precision = true;
        let data = tiny_data(1, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let name = trainer
            .bundle
            .gen_fwd
            .params
            .iter()
            .next()
            .map(|(n, _)| n.to_string())
            .unwrap();
        *trainer
            .bundle
            .gen_fwd
            .params
            .get_mut(&name)
            .unwrap()
            .iter_mut()
            .next()
            .unwrap() = f64::NAN;
        let disc_before = params_bits(&trainer.bundle.disc_fwd[0].params);
        let mut rng = stream_rng(11, "nan-mixed");
        let rec = trainer.train_step(0, &mut rng).unwrap();
        match rec {
            LogRecord::SiteStep { skipped, .. } => assert!(skipped),
            _ => panic!("expected site-step record"),
        }
        // The poisoned fakes made the forward-discriminator loss NaN, so
        // that update must have been skipped wholesale.
        assert_eq!(params_bits(&trainer.bundle.disc_fwd[0].params), disc_before);
    }

    #[test]
    fn mixed_precision_trains_when_healthy() {
        let mut cfg = tiny_config();
        cfg.mixed_precision = true;
        let data = tiny_data(1, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let mut rng = stream_rng(12, "mixed-healthy");
        let rec = trainer.train_step(0, &mut rng).unwrap();
        match rec {
            LogRecord::SiteStep {
                skipped, objective, ..
            } => {
                assert!(!skipped);
                assert!(objective.is_finite());
            }
            _ => panic!("expected site-step record"),
        }
    }

    // ------------------------------------------------------------------
    // Inference and checkpointing
    // ------------------------------------------------------------------

    #[test]
    fn harmonize_pads_clips_and_preserves_background() {
        let cfg = tiny_config();
        let data = tiny_data(1, 2);
        let trainer = Trainer::new(&cfg, &data).unwrap();
        // Unaligned dims force the pad/unpad round trip.
        let probe = tiny_volume((10, 9, 11), 0.2, 0.1);
        let out = trainer.bundle.harmonize(&probe).unwrap();
        assert_eq!(out.dims(), probe.dims());
        assert!(out.data.iter().all(|&v| v >= -1.0));
        // Freshly initialized generators are exact identities.
        let max_diff = out
            .data
            .iter()
            .zip(probe.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            ;
        assert!(max_diff < 1e-12, "identity init deviation {max_diff}");
        // Background is exactly the model-space floor.
        ndarray::Zip::from(&out.data).and(&out.mask).for_each(|&v, &m| {
            if !m {
                assert_eq!(v, -1.0);
            }
        });
        // Wrong space is rejected.
        let mut wrong = probe.clone();
        wrong.space = Space::Raw;
        assert!(matches!(
            trainer.bundle.harmonize(&wrong),
            Err(IguaneError::State(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_restores_every_network() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::SingleFwdDisc;
        let data = tiny_data(2, 2);
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let mut rng = stream_rng(13, "ckpt");
        trainer.train_step(0, &mut rng).unwrap();
        trainer.train_step(1, &mut rng).unwrap();
        trainer.bundle.best_validation_score = Some(0.75);
        trainer.bundle.best_epoch = Some(1);
        let dir = tempfile::tempdir().unwrap();
        let stamp = RunStamp::new(&cfg, cfg.seed).unwrap();
        trainer.bundle.save(dir.path(), &stamp).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.reference_site, "ref");
        assert_eq!(loaded.source_sites, vec!["src0", "src1"]);
        assert_eq!(loaded.ablation, Ablation::SingleFwdDisc);
        assert_eq!(loaded.best_validation_score, Some(0.75));
        assert_eq!(loaded.best_epoch, Some(1));
        assert_eq!(loaded.disc_fwd.len(), 1);
        assert_eq!(
            params_bits(&loaded.gen_fwd.params),
            params_bits(&trainer.bundle.gen_fwd.params)
        );
        assert_eq!(
            params_bits(&loaded.gen_bwd[1].params),
            params_bits(&trainer.bundle.gen_bwd[1].params)
        );
        assert_eq!(
            params_bits(&loaded.disc_fwd[0].params),
            params_bits(&trainer.bundle.disc_fwd[0].params)
        );
        assert_eq!(
            params_bits(&loaded.disc_bwd[0].params),
            params_bits(&trainer.bundle.disc_bwd[0].params)
        );
        // Same harmonization behavior after the round trip.
        let probe = tiny_volume((8, 8, 8), 0.1, 0.1);
        let a = trainer.bundle.harmonize(&probe).unwrap();
        let b = loaded.harmonize(&probe).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut cfg = no_augment(tiny_config());
            cfg.n_epochs = 1;
            cfg.steps_per_epoch = 2;
            let data = tiny_data(2, 2);
            let out = train(&cfg, &data, &[]).unwrap();
            params_bits(&out.bundle.gen_fwd.params)
        };
        assert_eq!(run(), run());
    }
}
