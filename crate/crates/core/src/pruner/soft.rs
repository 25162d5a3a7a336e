use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hard::hard_prune_ranked;
use super::loss::{chipnet_loss, LossValues, Reduction};
use super::optim::{adamw_step, AdamWConfig, OptimState};
use super::train::{correct_predictions, diverged, evaluate};
use crate::budgets::{validate_target, BudgetKind};
use crate::datakit::{Batch, DataSplits};
use crate::error::{Error, Result};
use crate::models::{GradTargets, HardMask, MaskMode, MaskedNet};
use crate::ndgrad::{BnMode, BnSettings, Tape};
use crate::projections::{ContinuationSchedule, ContinuationState, MaskSet, ProjectionConfig};

/// Name under which ψ's optimizer buffers are stored.
pub const PSI_SLOT: &str = "masks.psi";

/// Mask values within this distance of 0 or 1 count as crisp.
pub const CRISP_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub budget: BudgetKind,
    /// Target budget V0 in (0, 1].
    pub target: f64,
    /// Crispness loss weight.
    pub alpha1: f64,
    pub crispness_reduction: Reduction,
    /// Budget loss weight.
    pub alpha2: f64,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub schedule: ContinuationSchedule,
    pub projection: ProjectionConfig,
    /// ψ is drawn uniformly from this range when pruning starts.
    pub psi_init: [f64; 2],
    pub bn_momentum: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            budget: BudgetKind::Channel,
            target: 0.5,
            alpha1: 10.0,
            crispness_reduction: Reduction::Mean,
            alpha2: 30.0,
            epochs: 20,
            optimizer: AdamWConfig::default(),
            schedule: ContinuationSchedule::default(),
            projection: ProjectionConfig::default(),
            psi_init: [0.0, 1.0],
            bn_momentum: 0.1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        validate_target(self.target)?;
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Config("alpha1 and alpha2 must be non-negative".into()));
        }
        if !(self.psi_init[0] < self.psi_init[1]) {
            return Err(Error::Config("psi_init must be an increasing pair".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.projection.validate()
    }

    /// Logistic-only ablation: no Heaviside projection and no crispness loss.
    pub fn without_crispness(mut self) -> Self {
        self.projection.heaviside = false;
        self.alpha1 = 0.0;
        self
    }

    /// Budgets computed on the raw masks instead of their rounded values.
    pub fn without_logistic_round(mut self) -> Self {
        self.projection.logistic_round = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub gamma: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_crispness: f64,
    pub loss_budget: f64,
    pub train_accuracy: f64,
    /// Budget of the rounded soft masks at the end of the epoch.
    pub soft_budget: f64,
    /// Budget of the hard-pruned mask.
    pub hard_budget: f64,
    pub kept_channels: usize,
    /// Share of masks within [`CRISP_TOLERANCE`] of 0 or 1.
    pub crisp_fraction: f64,
    /// Hard-pruned validation accuracy; absent when the mask is fatal.
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    /// Layers left without a path; non-empty disqualifies the epoch.
    pub fatal_layers: Vec<usize>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,beta,gamma,loss_total,loss_ce,loss_crispness,loss_budget,train_accuracy,\
soft_budget,hard_budget,kept_channels,crisp_fraction,val_accuracy,val_loss,fatal_layers";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let fatal: Vec<String> = self.fatal_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.beta,
            self.gamma,
            self.loss_total,
            self.loss_ce,
            self.loss_crispness,
            self.loss_budget,
            self.train_accuracy,
            self.soft_budget,
            self.hard_budget,
            self.kept_channels,
            self.crisp_fraction,
            opt(self.val_accuracy),
            opt(self.val_loss),
            fatal.join(" ")
        )
    }
}

pub fn epoch_records_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// The best epoch seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub mask: HardMask,
    pub net: MaskedNet,
}

/// Everything soft pruning needs to continue from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneState {
    pub net: MaskedNet,
    /// Continuation of the next epoch to run.
    pub continuation: ContinuationState,
    pub optim: OptimState,
    pub records: Vec<EpochRecord>,
    pub best: Option<BestSnapshot>,
}

impl PruneState {
    /// Fresh state: ψ is re-drawn from `psi_init`, weights are kept.
    pub fn start(mut net: MaskedNet, cfg: &PruneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x9e37);
        let masks = MaskSet::random(net.shape().mask_layout(), cfg.psi_init[0], cfg.psi_init[1], &mut rng);
        net.set_psi(masks.psi)?;
        let continuation = ContinuationState::new(cfg.schedule);
        net.masks.refresh(&continuation, &cfg.projection);
        Ok(PruneState { net, continuation, optim: OptimState::default(), records: Vec::new(), best: None })
    }

    pub fn next_epoch(&self) -> usize {
        self.continuation.epoch
    }
}

pub fn crisp_fraction(z: &[f32]) -> f64 {
    if z.is_empty() {
        return 1.0;
    }
    let crisp = z.iter().filter(|&&v| (v as f64) < CRISP_TOLERANCE || (v as f64) > 1.0 - CRISP_TOLERANCE).count();
    crisp as f64 / z.len() as f64
}

fn soft_step(
    net: &mut MaskedNet,
    tape: &mut Tape,
    batch: &Batch,
    cfg: &PruneConfig,
    state: ContinuationState,
) -> Result<(Vec<crate::ndgrad::Var>, crate::ndgrad::Var, crate::ndgrad::Gradients, LossValues, usize)> {
    let bn = BnSettings { mode: BnMode::Train, momentum: Some(cfg.bn_momentum), ..BnSettings::default() };
    let mode = MaskMode::Soft { state, projection: cfg.projection };
    let pass = net.forward(tape, &batch.images, mode, bn, GradTargets::ALL)?;
    let (psi, z_tilde, z) = (pass.psi.expect("soft pass"), pass.z_tilde.expect("soft pass"), pass.z.expect("soft pass"));
    let rounded = if cfg.projection.logistic_round {
        tape.logistic(z, cfg.projection.round_steepness(&state), 0.5)?
    } else {
        z
    };
    let budget = tape.budget(rounded, cfg.budget, net.shared_shape())?;
    let loss = chipnet_loss(tape, budget, cfg.target, z_tilde, z, pass.logits, &batch.labels, cfg.alpha1, cfg.alpha2, cfg.crispness_reduction)?;
    let values = loss.values(tape);
    let hits = correct_predictions(tape.value(pass.logits), &batch.labels);
    let grads = tape.backward(loss.total)?;
    Ok((pass.params, psi, grads, values, hits))
}

/// Runs soft-pruning epochs until `cfg.epochs` (or `stop_after` epochs in
/// total) are done. `on_epoch` sees the state after every finished epoch.
pub fn soft_prune(
    state: &mut PruneState,
    data: &DataSplits,
    cfg: &PruneConfig,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&PruneState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let val = data.val_batches();
    let mut tape = Tape::new();
    let adam = cfg.optimizer;
    while state.next_epoch() < end {
        let epoch = state.next_epoch();
        let cont = state.continuation;
        let mut sums = LossValues::default();
        let (mut correct, mut samples) = (0usize, 0usize);
        for (b, batch) in data.train_batches(epoch).iter().enumerate() {
            tape.reset();
            let (vars, psi_var, grads, values, hits) =
                soft_step(&mut state.net, &mut tape, batch, cfg, cont).map_err(|e| diverged(e, epoch, b))?;
            if !values.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, detail: format!("loss components {values:?}") });
            }
            state.optim.step += 1;
            let t = state.optim.step;
            for (param, var) in state.net.params.iter_mut().zip(vars) {
                let Some(g) = grads.get(var) else { continue };
                let slots = state.optim.slots(&param.name, 2, param.tensor.numel());
                let (m, v) = slots.split_at_mut(1);
                adamw_step(
                    param.tensor.data_mut(),
                    g.data(),
                    &mut m[0],
                    &mut v[0],
                    t,
                    adam.lr,
                    (adam.beta1, adam.beta2),
                    adam.eps,
                    adam.weight_decay,
                    param.decay,
                );
            }
            if let Some(g) = grads.get(psi_var) {
                let slots = state.optim.slots(PSI_SLOT, 2, state.net.masks.len());
                let (m, v) = slots.split_at_mut(1);
                adamw_step(
                    &mut state.net.masks.psi,
                    g.data(),
                    &mut m[0],
                    &mut v[0],
                    t,
                    adam.psi_lr,
                    (adam.beta1, adam.beta2),
                    adam.eps,
                    0.0,
                    false,
                );
            }
            let n = batch.labels.len() as f64;
            sums.total += values.total * n;
            sums.cross_entropy += values.cross_entropy * n;
            sums.crispness += values.crispness * n;
            sums.budget += values.budget * n;
            correct += hits;
            samples += batch.labels.len();
        }

        state.net.masks.refresh(&cont, &cfg.projection);
        let masks = &state.net.masks;
        let z: Vec<f64> = masks.z.iter().map(|&v| v as f64).collect();
        let z_bar: Vec<f64> = masks.z_bar.iter().map(|&v| v as f64).collect();
        let soft_budget = cfg.budget.evaluate(state.net.shape(), &z_bar)?;
        let crisp = crisp_fraction(&masks.z);
        let psi: Vec<f64> = masks.psi.iter().map(|&v| v as f64).collect();
        let mask = hard_prune_ranked(&z, Some(&psi), cfg.budget, cfg.target, state.net.shape())?;
        let hard_budget = cfg.budget.evaluate(state.net.shape(), &mask.values())?;
        let fatal = state.net.validate_connectivity(&mask)?;
        let eval = if fatal.is_empty() { Some(evaluate(&mut state.net, &val, MaskMode::Hard(&mask))?) } else { None };
        let n = samples.max(1) as f64;
        state.records.push(EpochRecord {
            epoch,
            beta: cont.beta,
            gamma: cont.gamma,
            loss_total: sums.total / n,
            loss_ce: sums.cross_entropy / n,
            loss_crispness: sums.crispness / n,
            loss_budget: sums.budget / n,
            train_accuracy: correct as f64 / n,
            soft_budget,
            hard_budget,
            kept_channels: mask.kept(),
            crisp_fraction: crisp,
            val_accuracy: eval.map(|e| e.accuracy),
            val_loss: eval.map(|e| e.loss),
            fatal_layers: fatal,
        });
        if let Some(e) = eval {
            // later epochs win ties: their masks are crisper
            if state.best.as_ref().is_none_or(|b| e.accuracy >= b.val_accuracy) {
                let mut net = state.net.clone();
                net.installed_mask = Some(mask.clone());
                state.best = Some(BestSnapshot { epoch, val_accuracy: e.accuracy, mask, net });
            }
        }
        state.continuation = cont.step();
        on_epoch(state)?;
    }
    Ok(())
}
