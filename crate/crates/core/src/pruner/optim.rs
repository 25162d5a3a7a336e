use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SGD with momentum and step decay of the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 5e-2, momentum: 0.9, weight_decay: 1e-3, decay_every: 30, decay_factor: 0.5 }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("sgd needs lr > 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::Config("sgd decay_every must be positive and decay_factor > 0".into()));
        }
        Ok(())
    }
}

/// AdamW with a separate learning rate for the mask parameters ψ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate for ψ; ψ never receives weight decay.
    pub psi_lr: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-3, psi_lr: 5e-2 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.psi_lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adamw needs positive learning rates and eps, betas in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("adamw weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `v ← momentum·v + g + weight_decay·w; w ← w − lr·v`
pub fn sgd_momentum_step(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    debug_assert!(w.len() == g.len() && w.len() == v.len());
    for i in 0..w.len() {
        let wi = w[i] as f64;
        let vi = momentum * v[i] as f64 + g[i] as f64 + weight_decay * wi;
        v[i] = vi as f32;
        w[i] = (wi - lr * vi) as f32;
    }
}

/// One decoupled-weight-decay Adam step; `t` counts steps from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
    weight_decay: f64,
    decay: bool,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        let gi = g[i] as f64;
        let mut wi = w[i] as f64;
        if decay {
            wi -= lr * weight_decay * wi;
        }
        let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
        let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        w[i] = wi as f32;
    }
}

/// Per-tensor optimizer buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub buffers: BTreeMap<String, Vec<Vec<f32>>>,
}

impl OptimState {
    /// Buffers for `name`, created as `count` zero vectors of length `len`.
    pub fn slots(&mut self, name: &str, count: usize, len: usize) -> &mut Vec<Vec<f32>> {
        self.buffers.entry(name.to_string()).or_insert_with(|| vec![vec![0.0; len]; count])
    }
}
