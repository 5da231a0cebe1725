//! The three architectures: residual U-Net generator, patch
//! discriminator, and the convolutional age/sex predictor.
//!
//! All convolutions keep spatial extents stride-aligned (stride 1
//! preserves, stride 2 exactly halves even extents), so a volume padded
//! to a multiple of 2^levels flows through without shape surprises.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IguaneError, Result};
use crate::networks::{add_conv, Backend, EagerBackend, Init, ParamSet};

// ======================================================================
// Generator: residual U-Net with an additive tanh head
// ======================================================================

/// Residual U-Net hyperparameters. `levels` is the number of
/// downsampling steps; channel width doubles per level from `base`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base: usize,
    pub levels: usize,
    pub kernel: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 1,
            base: 32,
            levels: 3,
            kernel: 3,
        }
    }
}

impl GeneratorSpec {
    /// Input extents must be divisible by this for shapes to round-trip.
    pub fn alignment(&self) -> usize {
        1 << self.levels
    }

    fn width(&self, level: usize) -> usize {
        self.base << level
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base == 0 || self.levels == 0 {
            return Err(IguaneError::Config(
                "generator spec fields must be nonzero".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(IguaneError::Config(
                "generator kernel must be odd for stride-preserving padding".into(),
            ));
        }
        Ok(())
    }
}

/// The translation network. Output = input + tanh(head), so a
/// zero-initialized head makes the initial mapping the identity.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

impl Generator {
    pub fn new<R: Rng>(spec: GeneratorSpec, rng: &mut R) -> Result<Generator> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(rng);
        let k = spec.kernel;
        add_conv(&mut params, &mut init, "stem", spec.in_channels, spec.base, k, true, false);
        for l in 0..spec.levels {
            let c = spec.width(l);
            add_res_block(&mut params, &mut init, &format!("enc{l}"), c, k);
            add_conv(&mut params, &mut init, &format!("down{l}"), c, spec.width(l + 1), k, true, false);
        }
        add_res_block(&mut params, &mut init, "mid", spec.width(spec.levels), k);
        for l in (0..spec.levels).rev() {
            let c = spec.width(l);
            add_conv(&mut params, &mut init, &format!("up{l}"), spec.width(l + 1), c, k, true, false);
            add_conv(&mut params, &mut init, &format!("fuse{l}"), 2 * c, c, k, true, false);
            add_res_block(&mut params, &mut init, &format!("dec{l}"), c, k);
        }
        // Zero head: the untrained generator is exactly the identity.
        add_conv(&mut params, &mut init, "head", spec.base, spec.in_channels, k, false, true);
        Ok(Generator { spec, params })
    }

    /// Runs the architecture on any backend. `x` is `[C, D, H, W]` with
    /// every spatial extent divisible by `2^levels`.
    pub fn run<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let spec = &self.spec;
        let k = spec.kernel;
        let pad = k / 2;
        let mut h = conv_in_lrelu(b, x, "stem", 1, pad)?;
        let mut skips = Vec::with_capacity(spec.levels);
        for l in 0..spec.levels {
            h = res_block(b, &h, &format!("enc{l}"), pad)?;
            skips.push(h.clone());
            h = conv_in_lrelu(b, &h, &format!("down{l}"), 2, pad)?;
        }
        h = res_block(b, &h, "mid", pad)?;
        for l in (0..spec.levels).rev() {
            let up = b.upsample2x(&h)?;
            h = conv_in_lrelu(b, &up, &format!("up{l}"), 1, pad)?;
            let cat = b.concat(&h, &skips[l])?;
            h = conv_in_lrelu(b, &cat, &format!("fuse{l}"), 1, pad)?;
            h = res_block(b, &h, &format!("dec{l}"), pad)?;
        }
        let head = b.conv(&h, "head", 1, pad)?;
        let residual = b.tanh(&head);
        b.add(x, &residual)
    }

    /// Eager (no-graph) forward for inference.
    pub fn forward(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check_input(x.shape())?;
        let mut backend = EagerBackend { params: &self.params };
        self.run(&mut backend, x)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != self.spec.in_channels {
            return Err(IguaneError::Shape(format!(
                "generator expects [{}, D, H, W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        let a = self.spec.alignment();
        for &d in &shape[1..] {
            if d % a != 0 || d == 0 {
                return Err(IguaneError::Shape(format!(
                    "generator input extents must be positive multiples of {a}, got {shape:?}"
                )));
            }
        }
        Ok(())
    }
}

fn add_res_block<R: Rng>(params: &mut ParamSet, init: &mut Init<R>, name: &str, c: usize, k: usize) {
    add_conv(params, init, &format!("{name}.c1"), c, c, k, true, false);
    add_conv(params, init, &format!("{name}.c2"), c, c, k, true, false);
}

fn conv_in_lrelu<B: Backend>(b: &mut B, x: &B::T, name: &str, stride: usize, pad: usize) -> Result<B::T> {
    let h = b.conv(x, name, stride, pad)?;
    let h = b.instnorm(&h, name)?;
    Ok(b.lrelu(&h))
}

/// conv-IN-LReLU-conv-IN + skip, LReLU after the sum.
fn res_block<B: Backend>(b: &mut B, x: &B::T, name: &str, pad: usize) -> Result<B::T> {
    let h = conv_in_lrelu(b, x, &format!("{name}.c1"), 1, pad)?;
    let h = b.conv(&h, &format!("{name}.c2"), 1, pad)?;
    let h = b.instnorm(&h, &format!("{name}.c2"))?;
    let s = b.add(&h, x)?;
    Ok(b.lrelu(&s))
}

// ======================================================================
// Discriminator: strided patch classifier
// ======================================================================

/// Patch discriminator: `levels` Conv(k4,s2)-IN-LeakyReLU blocks with
/// channel doubling from `base`, then a Conv(k3,s1) map to one logit
/// channel with no norm or activation. Spatial extents shrink by
/// 2^levels, so 160x192x160 with the default 3 levels yields 20x24x20
/// patch logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base: usize,
    pub levels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 1,
            base: 64,
            levels: 3,
        }
    }
}

impl DiscriminatorSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base == 0 || self.levels == 0 {
            return Err(IguaneError::Config(
                "discriminator spec fields must be nonzero".into(),
            ));
        }
        Ok(())
    }

    /// Expected logit extents for a given input extent.
    pub fn out_len(&self, n: usize) -> usize {
        let mut v = n;
        for _ in 0..self.levels {
            v = v.div_ceil(2);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new<R: Rng>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Discriminator> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(rng);
        let mut cin = spec.in_channels;
        for l in 0..spec.levels {
            let cout = spec.base << l;
            add_conv(&mut params, &mut init, &format!("b{l}"), cin, cout, 4, true, false);
            cin = cout;
        }
        add_conv(&mut params, &mut init, "out", cin, 1, 3, false, false);
        Ok(Discriminator { spec, params })
    }

    pub fn run<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let mut h = x.clone();
        for l in 0..self.spec.levels {
            let name = format!("b{l}");
            h = b.conv(&h, &name, 2, 1)?;
            h = b.instnorm(&h, &name)?;
            h = b.lrelu(&h);
        }
        b.conv(&h, "out", 1, 1)
    }

    pub fn forward(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut backend = EagerBackend { params: &self.params };
        self.run(&mut backend, x)
    }
}

// ======================================================================
// Predictor: convolutional regressor / classifier
// ======================================================================

/// What the final dense unit means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorHead {
    /// Linear output (age regression).
    Linear,
    /// Logit output; apply a sigmoid to get a probability (sex).
    Logistic,
}

/// Downsampling conv stack (one stride-2 conv-IN-LReLU per level,
/// channel doubling from `base`), global average pool, dense to one
/// output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub in_channels: usize,
    pub base: usize,
    pub levels: usize,
    pub head: PredictorHead,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            in_channels: 1,
            base: 8,
            levels: 3,
            head: PredictorHead::Linear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub spec: PredictorSpec,
    pub params: ParamSet,
}

impl Predictor {
    pub fn new<R: Rng>(spec: PredictorSpec, rng: &mut R) -> Result<Predictor> {
        if spec.in_channels == 0 || spec.base == 0 || spec.levels == 0 {
            return Err(IguaneError::Config(
                "predictor spec fields must be nonzero".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut init = Init::new(rng);
        let mut cin = spec.in_channels;
        for l in 0..spec.levels {
            let cout = spec.base << l;
            add_conv(&mut params, &mut init, &format!("b{l}"), cin, cout, 3, true, false);
            cin = cout;
        }
        params.insert("head.w", init.normal(&[1, cin]));
        params.insert("head.b", Init::<R>::zeros(&[1]));
        Ok(Predictor { spec, params })
    }

    /// Returns the raw head output (linear value or logit) as `[1]`.
    pub fn run<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let mut h = x.clone();
        for l in 0..self.spec.levels {
            let name = format!("b{l}");
            h = b.conv(&h, &name, 2, 1)?;
            h = b.instnorm(&h, &name)?;
            h = b.lrelu(&h);
        }
        let pooled = b.channel_mean(&h)?;
        b.dense(&pooled, "head")
    }

    /// Eager prediction: the regression value, or the probability for a
    /// logistic head.
    pub fn predict(&self, x: &ArrayD<f64>) -> Result<f64> {
        let mut backend = EagerBackend { params: &self.params };
        let out = self.run(&mut backend, x)?;
        let raw = out[[0]];
        Ok(match self.spec.head {
            PredictorHead::Linear => raw,
            PredictorHead::Logistic => 1.0 / (1.0 + (-raw).exp()),
        })
    }
}
