//! Logistic and continuous-Heaviside mask projections, the crispness loss,
//! logistic rounding and the β/γ continuation schedule.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on γ; beyond it the Heaviside projection is already a step
/// function in `f64` and larger values only overflow its derivative.
pub const GAMMA_CAP: f64 = 1e4;

/// `1 / (1 + exp(-beta·(x - midpoint)))`.
pub fn logistic(x: f64, beta: f64, midpoint: f64) -> f64 {
    let t = beta * (x - midpoint);
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// d/dx of [`logistic`]: `beta·σ·(1-σ)`.
pub fn logistic_grad(x: f64, beta: f64, midpoint: f64) -> f64 {
    let s = logistic(x, beta, midpoint);
    beta * s * (1.0 - s)
}

/// `1 - exp(-gamma·z) + z·exp(-gamma)`.
///
/// Fixes both endpoints for every `gamma ≥ 0`; identity at `gamma = 0`.
pub fn heaviside(z: f64, gamma: f64) -> f64 {
    -(-gamma * z).exp_m1() + z * (-gamma).exp()
}

/// d/dz of [`heaviside`]: `gamma·exp(-gamma·z) + exp(-gamma)`.
pub fn heaviside_grad(z: f64, gamma: f64) -> f64 {
    gamma * (-gamma * z).exp() + (-gamma).exp()
}

/// Logistic curve centred at 0.5, used to sharpen masks before budgets are
/// evaluated.
pub fn logistic_round(z: f64, beta_round: f64) -> f64 {
    logistic(z, beta_round, 0.5)
}

pub fn logistic_round_grad(z: f64, beta_round: f64) -> f64 {
    logistic_grad(z, beta_round, 0.5)
}

/// `‖a - b‖²`.
pub fn crispness_loss(z_tilde: &[f64], z: &[f64]) -> Result<f64> {
    if z_tilde.len() != z.len() {
        return Err(Error::Layout(format!("crispness over {} vs {} masks", z_tilde.len(), z.len())));
    }
    Ok(z_tilde.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Constants of the continuation schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationSchedule {
    pub beta_init: f64,
    pub beta_step: f64,
    pub gamma_init: f64,
    pub gamma_double_every: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        ContinuationSchedule { beta_init: 1.0, beta_step: 0.02, gamma_init: 2.0, gamma_double_every: 2 }
    }
}

impl ContinuationSchedule {
    /// The coarser parameterization used for hyperparameter sweeps:
    /// β grows by 0.1 per epoch.
    pub fn coarse() -> Self {
        ContinuationSchedule { beta_step: 0.1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_init < 0.0 || self.beta_step < 0.0 || self.gamma_init < 0.0 {
            return Err(Error::Config("continuation constants must be non-negative".into()));
        }
        if self.gamma_double_every == 0 {
            return Err(Error::Config("gamma_double_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Current (β, γ) of the continuation, indexed by epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub beta: f64,
    pub gamma: f64,
    pub epoch: usize,
    pub schedule: ContinuationSchedule,
}

impl ContinuationState {
    pub fn new(schedule: ContinuationSchedule) -> Self {
        Self::at_epoch(schedule, 0)
    }

    pub fn at_epoch(schedule: ContinuationSchedule, epoch: usize) -> Self {
        let beta = schedule.beta_init + schedule.beta_step * epoch as f64;
        let doublings = (epoch / schedule.gamma_double_every.max(1)) as i32;
        let gamma = (schedule.gamma_init * 2f64.powi(doublings)).min(GAMMA_CAP);
        ContinuationState { beta, gamma, epoch, schedule }
    }

    /// Advances one epoch.
    pub fn step(&self) -> Self {
        Self::at_epoch(self.schedule, self.epoch + 1)
    }
}

/// How masks are produced from ψ during soft pruning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Midpoint ψ0 of the mask logistic curve.
    pub psi_midpoint: f64,
    /// Apply the continuous Heaviside after the logistic curve. Disabling
    /// leaves logistic curves only (`z = z̃`).
    pub heaviside: bool,
    /// Evaluate budgets on logistic-rounded masks instead of raw `z`.
    pub logistic_round: bool,
    /// Steepness of logistic rounding.
    pub beta_round: f64,
    /// Use the continuation β for rounding instead of `beta_round`.
    pub round_tracks_beta: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            psi_midpoint: 0.0,
            heaviside: true,
            logistic_round: true,
            beta_round: 20.0,
            round_tracks_beta: false,
        }
    }
}

impl ProjectionConfig {
    pub fn round_steepness(&self, state: &ContinuationState) -> f64 {
        if self.round_tracks_beta {
            state.beta
        } else {
            self.beta_round
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_round <= 0.0 || !self.beta_round.is_finite() {
            return Err(Error::Config("beta_round must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel mask parameters ψ and their cached projections, laid out
/// layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    layout: Vec<usize>,
    offsets: Vec<usize>,
    pub psi: Vec<f32>,
    pub z_tilde: Vec<f32>,
    pub z: Vec<f32>,
    pub z_bar: Vec<f32>,
}

impl MaskSet {
    /// ψ drawn uniformly from `[low, high)`.
    pub fn random<R: Rng>(layout: Vec<usize>, low: f64, high: f64, rng: &mut R) -> Self {
        let total = layout.iter().sum();
        let psi = (0..total).map(|_| rng.random_range(low..high) as f32).collect();
        Self::from_psi(layout, psi).expect("sizes agree by construction")
    }

    pub fn from_psi(layout: Vec<usize>, psi: Vec<f32>) -> Result<Self> {
        let total: usize = layout.iter().sum();
        if psi.len() != total {
            return Err(Error::Layout(format!("{} ψ values for {total} channels", psi.len())));
        }
        let mut offsets = Vec::with_capacity(layout.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &p in &layout {
            acc += p;
            offsets.push(acc);
        }
        Ok(MaskSet {
            layout,
            offsets,
            z_tilde: vec![0.0; total],
            z: vec![0.0; total],
            z_bar: vec![0.0; total],
            psi,
        })
    }

    pub fn layout(&self) -> &[usize] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    /// Recomputes `z_tilde`, `z` and `z_bar` from ψ.
    pub fn refresh(&mut self, state: &ContinuationState, cfg: &ProjectionConfig) {
        let round = cfg.round_steepness(state);
        for i in 0..self.psi.len() {
            let zt = logistic(self.psi[i] as f64, state.beta, cfg.psi_midpoint);
            let z = if cfg.heaviside { heaviside(zt, state.gamma) } else { zt };
            let zb = if cfg.logistic_round { logistic_round(z, round) } else { z };
            self.z_tilde[i] = zt as f32;
            self.z[i] = z as f32;
            self.z_bar[i] = zb as f32;
        }
    }
}

/// Sample curves of the projections as CSV with columns
/// `panel,param,x,y`:
///
/// * `logistic`: ψ → z̃ for several β
/// * `heaviside`: z̃ → z for several γ
/// * `composition_z_tilde` / `composition_z`: ψ → z̃ and ψ → z at β = 2, γ = 4
/// * `crispness`: ψ → Lc for several (β, γ) pairs, with `param` written `β/γ`
pub fn projection_curves_csv(samples: usize) -> String {
    let samples = samples.max(2);
    let psi_at = |i: usize| -4.0 + 8.0 * i as f64 / (samples - 1) as f64;
    let unit_at = |i: usize| i as f64 / (samples - 1) as f64;
    let mut out = String::from("panel,param,x,y\n");
    for beta in [0.1, 0.5, 1.0, 2.0, 5.0] {
        for i in 0..samples {
            let x = psi_at(i);
            let _ = writeln!(out, "logistic,{beta},{x},{}", logistic(x, beta, 0.0));
        }
    }
    for gamma in [1.0, 2.0, 8.0, 32.0, 256.0] {
        for i in 0..samples {
            let x = unit_at(i);
            let _ = writeln!(out, "heaviside,{gamma},{x},{}", heaviside(x, gamma));
        }
    }
    for i in 0..samples {
        let x = psi_at(i);
        let zt = logistic(x, 2.0, 0.0);
        let _ = writeln!(out, "composition_z_tilde,2/4,{x},{zt}");
        let _ = writeln!(out, "composition_z,2/4,{x},{}", heaviside(zt, 4.0));
    }
    for (beta, gamma) in [(1.0, 4.0), (1.1, 16.0), (1.1, 64.0), (2.0, 64.0), (2.0, 128.0), (1.0, 128.0)] {
        for i in 0..samples {
            let x = psi_at(i);
            let zt = logistic(x, beta, 0.0);
            let z = heaviside(zt, gamma);
            let _ = writeln!(out, "crispness,{beta}/{gamma},{x},{}", (zt - z) * (zt - z));
        }
    }
    out
}
