//! Adam optimizer over named parameter sets, plus the linear learning-rate
//! schedule used across a training run.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{IguaneError, Result};
use crate::networks::{BoundParams, ParamSet};
use crate::tensor::tape::Gradients;

/// Gradients keyed by parameter name, in the same naming scheme as
/// [`ParamSet`].
pub type GradMap = BTreeMap<String, ArrayD<f64>>;

/// Extracts a [`GradMap`] for the bound parameters after a backward pass.
/// Parameters the graph never touched are simply absent, which
/// [`Adam::step`] treats as a zero gradient.
pub fn collect_grads(bound: &BoundParams, grads: &Gradients) -> GradMap {
    let mut out = GradMap::new();
    for (name, var) in &bound.vars {
        if let Some(g) = grads.get(*var) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

/// Adam state for one network's parameters. Moment estimates are keyed by
/// parameter name, so the state survives as long as the parameter set keeps
/// its names (which checkpointing guarantees).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with
    /// bias-corrected moment estimates. Parameters missing from `grads`
    /// are treated as having zero gradient. Any non-finite gradient or
    /// learning rate aborts before touching the parameters.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(IguaneError::State(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        // Validate everything before mutating anything, so a failed step
        // leaves both parameters and moments untouched.
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(IguaneError::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(IguaneError::State(format!(
                        "non-finite gradient for `{name}`"
                    )));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let zero = || ArrayD::zeros(p.raw_dim());
            let g_owned;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    g_owned = zero();
                    &g_owned
                }
            };
            let m = self.m.entry(name.to_string()).or_insert_with(zero);
            let v = self.v.entry(name.to_string()).or_insert_with(zero);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Learning rate for a given update index under the linear decay schedule:
/// `lr(t) = lr_start + (lr_end - lr_start) * t / total`. Update 0 trains at
/// `lr_start`; the rate reaches `lr_end` exactly when all updates are done.
pub fn lr_at(update_index: u64, total_updates: u64, lr_start: f64, lr_end: f64) -> f64 {
    let total = total_updates.max(1) as f64;
    let progress = (update_index as f64 / total).min(1.0);
    lr_start + (lr_end - lr_start) * progress
}
