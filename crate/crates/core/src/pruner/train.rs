use serde::{Deserialize, Serialize};

use super::optim::{sgd_momentum_step, OptimState, SgdConfig};
use crate::datakit::{Batch, DataSplits};
use crate::error::{Error, Result};
use crate::models::{GradTargets, MaskMode, MaskedNet};
use crate::ndgrad::{BnMode, BnSettings, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    /// Running-statistics momentum of the batchnorm layers.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, sgd: SgdConfig::default(), bn_momentum: 0.1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const TRAIN_CSV_HEADER: &str = "epoch,lr,train_loss,train_accuracy,val_loss,val_accuracy";

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy
        )
    }
}

pub fn train_records_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation accuracy (the initial
    /// weights when no epoch ran).
    pub net: MaskedNet,
    pub best_epoch: Option<usize>,
    pub best: EvalResult,
    pub initial: EvalResult,
    pub records: Vec<TrainRecord>,
}

pub(crate) fn correct_predictions(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Eval-mode loss and accuracy over `batches`.
pub fn evaluate(net: &mut MaskedNet, batches: &[Batch], mode: MaskMode<'_>) -> Result<EvalResult> {
    let mut tape = Tape::new();
    let bn = BnSettings { mode: BnMode::Eval, ..BnSettings::default() };
    let (mut loss, mut correct, mut samples) = (0.0f64, 0usize, 0usize);
    for batch in batches {
        tape.reset();
        let pass = net.forward(&mut tape, &batch.images, mode, bn, GradTargets::NONE)?;
        let ce = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
        loss += tape.value(ce).item() as f64 * batch.labels.len() as f64;
        correct += correct_predictions(tape.value(pass.logits), &batch.labels);
        samples += batch.labels.len();
    }
    let n = samples.max(1) as f64;
    Ok(EvalResult { loss: loss / n, accuracy: correct as f64 / n, samples })
}

/// Replaces every batchnorm running statistic with the statistics of the
/// whole train split under `mode`.
pub fn recalibrate_bn(net: &mut MaskedNet, data: &DataSplits, mode: MaskMode<'_>) -> Result<()> {
    let [c, h, w] = data.train.sample_shape;
    let images = Tensor::new(vec![data.train.len(), c, h, w], data.train.images.clone())?;
    let bn = BnSettings { mode: BnMode::Train, momentum: None, ..BnSettings::default() };
    let mut tape = Tape::new();
    net.forward(&mut tape, &images, mode, bn, GradTargets::NONE)?;
    Ok(())
}

pub(crate) fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { op } => Error::Diverged { epoch, batch, detail: format!("{op} produced a non-finite value") },
        other => other,
    }
}

fn plain_step(net: &mut MaskedNet, tape: &mut Tape, batch: &Batch, bn: BnSettings) -> Result<(Vec<Var>, Gradients, f64, usize)> {
    let pass = net.forward(tape, &batch.images, MaskMode::Plain, bn, GradTargets::WEIGHTS)?;
    let ce = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
    let hits = correct_predictions(tape.value(pass.logits), &batch.labels);
    let loss = tape.value(ce).item() as f64;
    let grads = tape.backward(ce)?;
    Ok((pass.params, grads, loss, hits))
}

fn better(candidate: &EvalResult, best: &EvalResult) -> bool {
    candidate.accuracy > best.accuracy || (candidate.accuracy == best.accuracy && candidate.loss < best.loss)
}

/// Supervised training of the unmasked network with SGD and step decay.
/// Returns the weights of the best validation epoch.
pub fn train_plain(mut net: MaskedNet, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let val = data.val_batches();
    let initial = evaluate(&mut net, &val, MaskMode::Plain)?;
    let mut best_net = net.clone();
    let mut best = initial;
    let mut best_epoch = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut opt = OptimState::default();
    let bn = BnSettings { mode: BnMode::Train, momentum: Some(cfg.bn_momentum), ..BnSettings::default() };
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at(epoch);
        let (mut loss_sum, mut correct, mut samples) = (0.0f64, 0usize, 0usize);
        for (b, batch) in data.train_batches(epoch).iter().enumerate() {
            tape.reset();
            let (vars, grads, loss, hits) =
                plain_step(&mut net, &mut tape, batch, bn).map_err(|e| diverged(e, epoch, b))?;
            for (param, var) in net.params.iter_mut().zip(vars) {
                let Some(g) = grads.get(var) else { continue };
                let len = param.tensor.numel();
                let v = &mut opt.slots(&param.name, 1, len)[0];
                let wd = if param.decay { cfg.sgd.weight_decay } else { 0.0 };
                sgd_momentum_step(param.tensor.data_mut(), g.data(), v, lr, cfg.sgd.momentum, wd);
            }
            opt.step += 1;
            loss_sum += loss * batch.labels.len() as f64;
            correct += hits;
            samples += batch.labels.len();
        }
        let eval = evaluate(&mut net, &val, MaskMode::Plain)?;
        records.push(TrainRecord {
            epoch,
            lr,
            train_loss: loss_sum / samples as f64,
            train_accuracy: correct as f64 / samples as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        });
        if best_epoch.is_none() || better(&eval, &best) {
            best = eval;
            best_epoch = Some(epoch);
            best_net = net.clone();
        }
    }
    Ok(TrainOutcome { net: best_net, best_epoch, best, initial, records })
}
