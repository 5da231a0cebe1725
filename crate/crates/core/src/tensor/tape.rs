//! Reverse-mode autodiff tape over [`ArrayD<f64>`] values.
//!
//! Each op records its parents and whatever forward context its adjoint
//! needs; [`Tape::backward`] walks the nodes in reverse creation order.
//! Gradients are only propagated into subgraphs that contain a
//! differentiable leaf, so feeding a detached tensor (e.g. a generated
//! image during a discriminator update) skips the expensive
//! grad-wrt-input convolution kernels automatically.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

use crate::error::{IguaneError, Result};
use crate::tensor::ops::{self, InstNormCtx};

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    InstNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        ctx: InstNormCtx,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Upsample2x {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        split: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    MeanAll {
        x: usize,
    },
    MseTo {
        x: usize,
        target: f64,
    },
    L1DiffMean {
        a: usize,
        b: usize,
    },
    BceLogit {
        x: usize,
        target: f64,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Flatten {
        x: usize,
    },
    ChannelMean {
        x: usize,
    },
    SumWeighted {
        terms: Vec<(f64, usize)>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by [`Var`] id, as returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id()).and_then(|g| g.as_ref())
    }

    /// Gradient for a variable that must have one.
    pub fn expect(&self, v: Var) -> Result<&ArrayD<f64>> {
        self.get(v).ok_or_else(|| {
            IguaneError::State(format!("no gradient recorded for var {}", v.id()))
        })
    }
}

/// Recording tape. Create one per training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    round_f32: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            round_f32: false,
        }
    }

    /// A tape whose forward values are rounded to f32 precision after
    /// every op — the reduced-precision training mode. Adjoint math
    /// stays in f64.
    pub fn new_round_f32() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            round_f32: true,
        }
    }

    fn push(&self, mut value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        if self.round_f32 {
            value.mapv_inplace(|v| v as f32 as f64);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Registers a leaf tensor. `requires_grad` marks trainable
    /// parameters; data inputs should pass `false`.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Clones a variable's current value off the tape.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.id()].value.clone()
    }

    /// Scalar value of a length-1 variable.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.id()].value;
        if val.len() != 1 {
            return Err(IguaneError::Shape(format!(
                "expected scalar, got shape {:?}",
                val.shape()
            )));
        }
        Ok(*val.iter().next().unwrap())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id()].value.shape().to_vec()
    }

    // ------------------------------------------------------------------
    // Ops
    // ------------------------------------------------------------------

    pub fn conv3d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            ops::conv3d_forward(
                &nodes[x.id()].value,
                &nodes[w.id()].value,
                b.map(|b| &nodes[b.id()].value),
                stride,
                pad,
            )?
        };
        let mut parents = vec![x.id(), w.id()];
        if let Some(b) = b {
            parents.push(b.id());
        }
        let rg = self.requires(&parents);
        Ok(self.push(
            value,
            Op::Conv3d {
                x: x.id(),
                w: w.id(),
                b: b.map(Var::id),
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn instnorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, ctx) = {
            let nodes = self.nodes.borrow();
            ops::instnorm_forward(
                &nodes[x.id()].value,
                &nodes[gamma.id()].value,
                &nodes[beta.id()].value,
                eps,
            )?
        };
        let rg = self.requires(&[x.id(), gamma.id(), beta.id()]);
        Ok(self.push(
            value,
            Op::InstNorm {
                x: x.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                eps,
                ctx,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            ops::leaky_relu_forward(&nodes[x.id()].value, slope)
        };
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::LeakyRelu { x: x.id(), slope }, rg)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.id()].value.mapv(f64::tanh);
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::Tanh { x: x.id() }, rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.id()]
            .value
            .mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::Sigmoid { x: x.id() }, rg)
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let value = ops::upsample2x_forward(&self.nodes.borrow()[x.id()].value)?;
        let rg = self.requires(&[x.id()]);
        Ok(self.push(value, Op::Upsample2x { x: x.id() }, rg))
    }

    /// Concatenates two `[C,D,H,W]` maps along channels.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (value, split) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id()].value;
            let bv = &nodes[b.id()].value;
            if av.ndim() != 4 || bv.ndim() != 4 || av.shape()[1..] != bv.shape()[1..] {
                return Err(IguaneError::Shape(format!(
                    "concat: incompatible shapes {:?} and {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let split = av.shape()[0];
            let mut shape = av.shape().to_vec();
            shape[0] += bv.shape()[0];
            let mut data = Vec::with_capacity(av.len() + bv.len());
            data.extend_from_slice(av.as_slice().unwrap());
            data.extend_from_slice(bv.as_slice().unwrap());
            (ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(), split)
        };
        let rg = self.requires(&[a.id(), b.id()]);
        Ok(self.push(
            value,
            Op::ConcatChannels {
                a: a.id(),
                b: b.id(),
                split,
            },
            rg,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id()].value;
            let bv = &nodes[b.id()].value;
            if av.shape() != bv.shape() {
                return Err(IguaneError::Shape(format!(
                    "add: shape mismatch {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            av + bv
        };
        let rg = self.requires(&[a.id(), b.id()]);
        Ok(self.push(value, Op::Add { a: a.id(), b: b.id() }, rg))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[x.id()].value.mapv(|v| c * v);
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::Scale { x: x.id(), c }, rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let value = ops::mean_all(&self.nodes.borrow()[x.id()].value);
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::MeanAll { x: x.id() }, rg)
    }

    /// Scalar `mean((x - target)^2)` — the least-squares GAN loss.
    pub fn mse_to(&self, x: Var, target: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id()].value;
            let n = xv.len() as f64;
            let s: f64 = xv.iter().map(|&v| (v - target) * (v - target)).sum();
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s / n]).unwrap()
        };
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::MseTo { x: x.id(), target }, rg)
    }

    /// Scalar `mean(|a - b|)` — cycle and identity losses.
    pub fn l1_diff_mean(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id()].value;
            let bv = &nodes[b.id()].value;
            if av.shape() != bv.shape() {
                return Err(IguaneError::Shape(format!(
                    "l1_diff_mean: shape mismatch {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let n = av.len() as f64;
            let s: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y).abs()).sum();
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s / n]).unwrap()
        };
        let rg = self.requires(&[a.id(), b.id()]);
        Ok(self.push(value, Op::L1DiffMean { a: a.id(), b: b.id() }, rg))
    }

    /// Scalar mean binary cross-entropy of logits `x` against a constant
    /// target in [0,1], computed in the numerically stable logit form.
    pub fn bce_logit(&self, x: Var, target: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id()].value;
            let n = xv.len() as f64;
            let s: f64 = xv
                .iter()
                .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
                .sum();
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![s / n]).unwrap()
        };
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::BceLogit { x: x.id(), target }, rg)
    }

    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            ops::dense_forward(
                &nodes[x.id()].value,
                &nodes[w.id()].value,
                &nodes[b.id()].value,
            )?
        };
        let rg = self.requires(&[x.id(), w.id(), b.id()]);
        Ok(self.push(
            value,
            Op::Dense {
                x: x.id(),
                w: w.id(),
                b: b.id(),
            },
            rg,
        ))
    }

    pub fn flatten(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id()].value;
            let n = xv.len();
            xv.clone().into_shape_with_order(IxDyn(&[n])).unwrap()
        };
        let rg = self.requires(&[x.id()]);
        self.push(value, Op::Flatten { x: x.id() }, rg)
    }

    /// `[C,D,H,W] -> [C]` global average pool.
    pub fn channel_mean(&self, x: Var) -> Result<Var> {
        let value = ops::channel_mean_forward(&self.nodes.borrow()[x.id()].value)?;
        let rg = self.requires(&[x.id()]);
        Ok(self.push(value, Op::ChannelMean { x: x.id() }, rg))
    }

    /// Weighted sum of scalar terms: total losses.
    pub fn sum_weighted(&self, terms: &[(f64, Var)]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut acc = 0.0;
            for &(c, v) in terms {
                let val = &nodes[v.id()].value;
                if val.len() != 1 {
                    return Err(IguaneError::Shape(format!(
                        "sum_weighted: term {} is not scalar (shape {:?})",
                        v.id(),
                        val.shape()
                    )));
                }
                acc += c * val.iter().next().unwrap();
            }
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![acc]).unwrap()
        };
        let ids: Vec<usize> = terms.iter().map(|&(_, v)| v.id()).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            value,
            Op::SumWeighted {
                terms: terms.iter().map(|&(c, v)| (c, v.id())).collect(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulates d(root)/d(leaf) for every differentiable leaf below
    /// `root`, which must be scalar.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id()].value.len() != 1 {
            return Err(IguaneError::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id()].value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.id()] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for id in (0..=root.id()).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let rg = |i: usize| nodes[i].requires_grad;
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv3d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let need_gb = b.map(rg).unwrap_or(false);
                    let out = ops::conv3d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &g,
                        *stride,
                        *pad,
                        rg(*x),
                        rg(*w),
                        need_gb,
                    )?;
                    if let Some(gx) = out.gx {
                        accumulate(&mut grads[*x], gx);
                    }
                    if let Some(gw) = out.gw {
                        accumulate(&mut grads[*w], gw);
                    }
                    if let (Some(bid), Some(gb)) = (b, out.gb) {
                        accumulate(&mut grads[*bid], gb);
                    }
                }
                Op::InstNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                    ctx,
                } => {
                    let (gx, gg, gb) =
                        ops::instnorm_backward(&nodes[*x].value, &nodes[*gamma].value, ctx, &g, *eps);
                    if rg(*x) {
                        accumulate(&mut grads[*x], gx);
                    }
                    if rg(*gamma) {
                        accumulate(&mut grads[*gamma], gg);
                    }
                    if rg(*beta) {
                        accumulate(&mut grads[*beta], gb);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = ops::leaky_relu_backward(&nodes[*x].value, &g, *slope);
                    accumulate(&mut grads[*x], gx);
                }
                Op::Tanh { x } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[id].value, |gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads[*x], gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&nodes[id].value, |gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads[*x], gx);
                }
                Op::Upsample2x { x } => {
                    let gx = ops::upsample2x_backward(nodes[*x].value.shape(), &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::ConcatChannels { a, b, split } => {
                    let shape_a = nodes[*a].value.shape().to_vec();
                    let shape_b = nodes[*b].value.shape().to_vec();
                    let gsl = g.as_slice().unwrap();
                    let na: usize = shape_a.iter().product();
                    debug_assert_eq!(*split, shape_a[0]);
                    if rg(*a) {
                        let ga =
                            ArrayD::from_shape_vec(IxDyn(&shape_a), gsl[..na].to_vec()).unwrap();
                        accumulate(&mut grads[*a], ga);
                    }
                    if rg(*b) {
                        let gb =
                            ArrayD::from_shape_vec(IxDyn(&shape_b), gsl[na..].to_vec()).unwrap();
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::Add { a, b } => {
                    if rg(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads[*x], g.mapv(|v| v * c));
                }
                Op::MeanAll { x } => {
                    let gv = g[[0]] / nodes[*x].value.len() as f64;
                    accumulate(
                        &mut grads[*x],
                        ArrayD::from_elem(nodes[*x].value.raw_dim(), gv),
                    );
                }
                Op::MseTo { x, target } => {
                    let n = nodes[*x].value.len() as f64;
                    let gv = g[[0]];
                    let gx = nodes[*x].value.mapv(|v| 2.0 * (v - target) / n * gv);
                    accumulate(&mut grads[*x], gx);
                }
                Op::L1DiffMean { a, b } => {
                    let n = nodes[*a].value.len() as f64;
                    let gv = g[[0]];
                    let mut diff = nodes[*a].value.clone();
                    diff.zip_mut_with(&nodes[*b].value, |d, &y| *d = ops::sign0(*d - y) / n * gv);
                    if rg(*a) {
                        accumulate(&mut grads[*a], diff.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads[*b], diff.mapv(|v| -v));
                    }
                }
                Op::BceLogit { x, target } => {
                    let n = nodes[*x].value.len() as f64;
                    let gv = g[[0]];
                    let gx = nodes[*x]
                        .value
                        .mapv(|z| (1.0 / (1.0 + (-z).exp()) - target) / n * gv);
                    accumulate(&mut grads[*x], gx);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(&nodes[*x].value, &nodes[*w].value, &g);
                    if rg(*x) {
                        accumulate(&mut grads[*x], gx);
                    }
                    if rg(*w) {
                        accumulate(&mut grads[*w], gw);
                    }
                    if rg(*b) {
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::Flatten { x } => {
                    let gx = g
                        .clone()
                        .into_shape_with_order(nodes[*x].value.raw_dim())
                        .unwrap();
                    accumulate(&mut grads[*x], gx);
                }
                Op::ChannelMean { x } => {
                    let gx = ops::channel_mean_backward(nodes[*x].value.shape(), &g);
                    accumulate(&mut grads[*x], gx);
                }
                Op::SumWeighted { terms } => {
                    let gv = g[[0]];
                    for &(c, t) in terms {
                        if rg(t) {
                            accumulate(
                                &mut grads[t],
                                ArrayD::from_elem(IxDyn(&[1]), c * gv),
                            );
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

// ======================================================================
// Finite-difference checking utilities
// ======================================================================

/// Central-difference gradient of a scalar function of one tensor.
pub mod gradcheck {
    use ndarray::ArrayD;

    /// d f / d x by central differences at step `h`, element by element.
    pub fn central_diff<F: FnMut(&ArrayD<f64>) -> f64>(
        mut f: F,
        x: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Worst-case relative disagreement between analytic and numeric
    /// gradients: |a - n| / max(|a| + |n|, 1e-6).
    pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}
