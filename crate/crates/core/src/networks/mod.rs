//! Network parameter storage and the execution backends.
//!
//! Architectures are written once against the [`Backend`] trait and run
//! either on an autodiff tape (training) or eagerly without any graph
//! retention (inference on full-size volumes).

pub mod arch;
pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IguaneError, Result};
use crate::tensor::{ops, Tape, Var};

pub use arch::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Predictor, PredictorSpec};

/// Negative slope used by every LeakyReLU in this crate.
pub const LRELU_SLOPE: f64 = 0.2;
/// Epsilon added to the mean absolute deviation in instance norm.
pub const INSTNORM_EPS: f64 = 1e-5;

// ======================================================================
// Parameter storage
// ======================================================================

/// Named parameter arrays in fixed creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| IguaneError::State(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| IguaneError::State(format!("unknown parameter '{name}'")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Initialization helpers shared by all constructors: convolution and
/// dense weights are N(0, 0.02) (the CycleGAN convention), biases zero,
/// instance-norm gains one.
pub struct Init<'r, R: Rng> {
    rng: &'r mut R,
    normal: Normal<f64>,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Init {
            rng,
            normal: Normal::new(0.0, 0.02).unwrap(),
        }
    }

    pub fn normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| self.normal.sample(self.rng))
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), 1.0)
    }
}

/// Adds a conv unit's parameters: `<name>.w`, `<name>.b`, and when
/// `norm` is set the instance-norm affine `<name>.g` / `<name>.be`.
fn add_conv<R: Rng>(
    params: &mut ParamSet,
    init: &mut Init<R>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    norm: bool,
    zero_weights: bool,
) {
    let w = if zero_weights {
        Init::<R>::zeros(&[cout, cin, k, k, k])
    } else {
        init.normal(&[cout, cin, k, k, k])
    };
    params.insert(&format!("{name}.w"), w);
    params.insert(&format!("{name}.b"), Init::<R>::zeros(&[cout]));
    if norm {
        params.insert(&format!("{name}.g"), Init::<R>::ones(&[cout]));
        params.insert(&format!("{name}.be"), Init::<R>::zeros(&[cout]));
    }
}

// ======================================================================
// Execution backends
// ======================================================================

/// Abstract op set an architecture runs against.
pub trait Backend {
    type T: Clone;

    /// Convolution by parameter name (`<name>.w` / `<name>.b`).
    fn conv(&mut self, x: &Self::T, name: &str, stride: usize, pad: usize) -> Result<Self::T>;
    /// Instance norm by parameter name (`<name>.g` / `<name>.be`).
    fn instnorm(&mut self, x: &Self::T, name: &str) -> Result<Self::T>;
    fn lrelu(&mut self, x: &Self::T) -> Self::T;
    fn tanh(&mut self, x: &Self::T) -> Self::T;
    fn upsample2x(&mut self, x: &Self::T) -> Result<Self::T>;
    fn concat(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn channel_mean(&mut self, x: &Self::T) -> Result<Self::T>;
    /// Dense layer by parameter name (`<name>.w` / `<name>.b`).
    fn dense(&mut self, x: &Self::T, name: &str) -> Result<Self::T>;
}

/// Parameters bound to tape leaves, in ParamSet order.
pub struct BoundParams<'t> {
    pub vars: Vec<(String, Var)>,
    map: BTreeMap<String, Var>,
    _tape: std::marker::PhantomData<&'t Tape>,
}

impl<'t> BoundParams<'t> {
    /// Registers every parameter of `params` on `tape`.
    pub fn bind(tape: &'t Tape, params: &ParamSet, requires_grad: bool) -> BoundParams<'t> {
        let mut vars = Vec::with_capacity(params.len());
        let mut map = BTreeMap::new();
        for (name, value) in params.iter() {
            let v = tape.leaf(value.clone(), requires_grad);
            vars.push((name.to_string(), v));
            map.insert(name.to_string(), v);
        }
        BoundParams {
            vars,
            map,
            _tape: std::marker::PhantomData,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| IguaneError::State(format!("unbound parameter '{name}'")))
    }
}

/// Backend that records onto a [`Tape`].
pub struct TapeBackend<'t, 'b> {
    pub tape: &'t Tape,
    pub params: &'b BoundParams<'t>,
}

impl<'t, 'b> Backend for TapeBackend<'t, 'b> {
    type T = Var;

    fn conv(&mut self, x: &Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.params.var(&format!("{name}.w"))?;
        let b = self.params.var(&format!("{name}.b"))?;
        self.tape.conv3d(*x, w, Some(b), stride, pad)
    }

    fn instnorm(&mut self, x: &Var, name: &str) -> Result<Var> {
        let g = self.params.var(&format!("{name}.g"))?;
        let be = self.params.var(&format!("{name}.be"))?;
        self.tape.instnorm(*x, g, be, INSTNORM_EPS)
    }

    fn lrelu(&mut self, x: &Var) -> Var {
        self.tape.leaky_relu(*x, LRELU_SLOPE)
    }

    fn tanh(&mut self, x: &Var) -> Var {
        self.tape.tanh(*x)
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        self.tape.upsample2x(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn channel_mean(&mut self, x: &Var) -> Result<Var> {
        self.tape.channel_mean(*x)
    }

    fn dense(&mut self, x: &Var, name: &str) -> Result<Var> {
        let w = self.params.var(&format!("{name}.w"))?;
        let b = self.params.var(&format!("{name}.b"))?;
        let flat = self.tape.flatten(*x);
        self.tape.dense(flat, w, b)
    }
}

/// Backend that evaluates immediately and retains nothing.
pub struct EagerBackend<'p> {
    pub params: &'p ParamSet,
}

impl<'p> Backend for EagerBackend<'p> {
    type T = ArrayD<f64>;

    fn conv(&mut self, x: &ArrayD<f64>, name: &str, stride: usize, pad: usize) -> Result<ArrayD<f64>> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        ops::conv3d_forward(x, w, Some(b), stride, pad)
    }

    fn instnorm(&mut self, x: &ArrayD<f64>, name: &str) -> Result<ArrayD<f64>> {
        let g = self.params.get(&format!("{name}.g"))?;
        let be = self.params.get(&format!("{name}.be"))?;
        Ok(ops::instnorm_forward(x, g, be, INSTNORM_EPS)?.0)
    }

    fn lrelu(&mut self, x: &ArrayD<f64>) -> ArrayD<f64> {
        ops::leaky_relu_forward(x, LRELU_SLOPE)
    }

    fn tanh(&mut self, x: &ArrayD<f64>) -> ArrayD<f64> {
        x.mapv(f64::tanh)
    }

    fn upsample2x(&mut self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        ops::upsample2x_forward(x)
    }

    fn concat(&mut self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if a.ndim() != 4 || b.ndim() != 4 || a.shape()[1..] != b.shape()[1..] {
            return Err(IguaneError::Shape(format!(
                "concat: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.as_slice().unwrap());
        data.extend_from_slice(b.as_slice().unwrap());
        Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
    }

    fn add(&mut self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if a.shape() != b.shape() {
            return Err(IguaneError::Shape(format!(
                "add: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(a + b)
    }

    fn channel_mean(&mut self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        ops::channel_mean_forward(x)
    }

    fn dense(&mut self, x: &ArrayD<f64>, name: &str) -> Result<ArrayD<f64>> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let n = x.len();
        let flat = x.clone().into_shape_with_order(IxDyn(&[n])).unwrap();
        ops::dense_forward(&flat, w, b)
    }
}
