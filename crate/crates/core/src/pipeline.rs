//! The pretrain → prune → finetune stages on a run directory.
//!
//! Every stage reads its prerequisites from `out_dir`, writes a checkpoint,
//! CSV metrics, a JSON summary and a manifest holding the resolved config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::budgets::BudgetKind;
use crate::config::RunConfig;
use crate::datakit::{
    export_mask, import_mask, load_checkpoint, load_idx, mask_budgets, save_checkpoint, split_and_batch, synth_blobs,
    BestMetric, Checkpoint, DataSplits, NamedArray, CHECKPOINT_FORMAT_VERSION, MASK_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::models::{build_model, HardMask, MaskMode, MaskedNet};
use crate::projections::{projection_curves_csv, ContinuationState};
use crate::pruner::{
    crisp_fraction, epoch_records_csv, evaluate, hard_prune_ranked, install_mask, recalibrate_bn, soft_prune,
    train_plain, train_records_csv, BestSnapshot, EpochRecord, EvalResult, OptimState, PruneState, TrainRecord,
    PruneConfig, EPOCH_CSV_HEADER, TRAIN_CSV_HEADER,
};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRUNE_CHECKPOINT: &str = "prune.ckpt";
pub const TRANSFER_CHECKPOINT: &str = "transfer.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const PRETRAIN_CSV: &str = "pretrain_metrics.csv";
pub const PRUNE_CSV: &str = "prune_epochs.csv";
pub const FINETUNE_CSV: &str = "finetune_metrics.csv";
pub const MASK_FILE: &str = "mask.json";
pub const REPORT_DIR: &str = "report";
pub const HISTOGRAM_BINS: usize = 64;
/// Version of the CSV column layouts written by the pipeline.
pub const CSV_SCHEMA_VERSION: u32 = 1;

const Z_ARRAY: &str = "masks/z";
const Z_BAR_ARRAY: &str = "masks/z_bar";
const BEST_PREFIX: &str = "best/";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Checkpoint(format!("{} not found; {hint}", path.display())))
    }
}

/// Writes `manifest-<stage>.json`: the resolved config plus the seed and
/// format versions needed to repeat the stage.
pub fn write_manifest(cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let manifest = json!({
        "stage": stage,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "formats": {
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
            "mask": MASK_FORMAT_VERSION,
            "csv": CSV_SCHEMA_VERSION,
            "csv_headers": {
                PRETRAIN_CSV: TRAIN_CSV_HEADER,
                FINETUNE_CSV: TRAIN_CSV_HEADER,
                PRUNE_CSV: EPOCH_CSV_HEADER,
            },
        },
        "config": cfg.to_json()?,
    });
    let path = cfg.out_dir.join(format!("manifest-{stage}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads the configured dataset and splits it.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplits> {
    cfg.data.validate()?;
    let ds = match (&cfg.data.synth, &cfg.data.idx) {
        (Some(s), _) => synth_blobs(s.classes, s.samples_per_class, s.image_size, s.noise, cfg.seed)?,
        (None, Some(idx)) => load_idx(&idx.images, &idx.labels, None)?,
        (None, None) => unreachable!("validated above"),
    };
    split_and_batch(&ds, cfg.data.val_fraction, cfg.data.batch_size, cfg.seed)
}

fn fresh_model(cfg: &RunConfig, data: &DataSplits) -> Result<MaskedNet> {
    build_model(&cfg.model, data.train.sample_shape, data.train.classes, cfg.seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    pub checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
    pub initial: EvalResult,
    pub best: EvalResult,
    pub parameters: usize,
    pub records: Vec<TrainRecord>,
}

fn train_checkpoint(stage: &str, net: &MaskedNet, cfg: &RunConfig, summary: &TrainSummary) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::from_net(stage, net, cfg.to_json()?);
    ckpt.best = summary.best_epoch.map(|epoch| BestMetric {
        epoch,
        metric: "val_accuracy".into(),
        value: summary.best.accuracy,
    });
    ckpt.state = json!({ "records": summary.records });
    Ok(ckpt)
}

/// Trains the dense network from scratch.
pub fn pretrain(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let net = fresh_model(cfg, &data)?;
    let out = train_plain(net, &data, &cfg.pretrain)?;
    let summary = TrainSummary {
        stage: "pretrain".into(),
        checkpoint: cfg.out_dir.join(PRETRAIN_CHECKPOINT),
        best_epoch: out.best_epoch,
        initial: out.initial,
        best: out.best,
        parameters: out.net.parameter_count(),
        records: out.records,
    };
    save_checkpoint(&train_checkpoint("pretrain", &out.net, cfg, &summary)?, &summary.checkpoint)?;
    write_file(&cfg.out_dir.join(PRETRAIN_CSV), train_records_csv(&summary.records))?;
    write_json(&cfg.out_dir.join("pretrain_summary.json"), &summary)?;
    write_manifest(cfg, "pretrain")?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PruneOptions {
    /// Continue from `prune.ckpt` instead of starting from the pretrained
    /// weights.
    pub resume: bool,
    /// Stop once this many epochs (in total) are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PruneSummary {
    pub checkpoint: PathBuf,
    pub epochs_done: usize,
    pub complete: bool,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub kept_per_layer: Option<Vec<usize>>,
    /// Budgets of the selected hard mask for every kind.
    pub budgets: Option<BTreeMap<BudgetKind, f64>>,
    pub target: f64,
    pub final_crisp_fraction: Option<f64>,
    pub mask_file: Option<PathBuf>,
}

/// Comparable part of a config for resuming: everything that shapes the
/// soft-pruning trajectory except the epoch count.
fn trajectory_key(cfg: &serde_json::Value) -> serde_json::Value {
    let mut prune = cfg.get("prune").cloned().unwrap_or_default();
    if let Some(p) = prune.as_object_mut() {
        p.remove("epochs");
    }
    json!({ "seed": cfg.get("seed"), "data": cfg.get("data"), "model": cfg.get("model"), "prune": prune })
}

/// Serializes a prune state into a resumable checkpoint.
pub fn prune_checkpoint(state: &PruneState, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut net = state.net.clone();
    net.installed_mask = None;
    let mut ckpt = Checkpoint::from_net("prune", &net, cfg.to_json()?);
    ckpt.continuation = Some(state.continuation);
    ckpt.hard_mask = state.best.as_ref().map(|b| b.mask.clone());
    ckpt.best = state.best.as_ref().map(|b| BestMetric {
        epoch: b.epoch,
        metric: "hard_val_accuracy".into(),
        value: b.val_accuracy,
    });
    ckpt.state = json!({
        "records": state.records,
        "optim_step": state.optim.step,
        "complete": state.next_epoch() >= cfg.prune.epochs,
    });
    if let Some(b) = &state.best {
        ckpt.push_net(BEST_PREFIX, &b.net);
    }
    for (name, buffers) in &state.optim.buffers {
        for (i, buf) in buffers.iter().enumerate() {
            ckpt.arrays.push(NamedArray { name: format!("opt/{i}/{name}"), shape: vec![buf.len()], data: buf.clone() });
        }
    }
    let masks = &state.net.masks;
    ckpt.arrays.push(NamedArray { name: Z_ARRAY.into(), shape: vec![masks.len()], data: masks.z.clone() });
    ckpt.arrays.push(NamedArray { name: Z_BAR_ARRAY.into(), shape: vec![masks.len()], data: masks.z_bar.clone() });
    Ok(ckpt)
}

/// Rebuilds the prune state written by [`prune_checkpoint`].
pub fn prune_state_from_checkpoint(ckpt: &Checkpoint) -> Result<PruneState> {
    if ckpt.stage != "prune" {
        return Err(Error::Checkpoint(format!("expected a prune checkpoint, found stage `{}`", ckpt.stage)));
    }
    let continuation = ckpt.continuation.ok_or_else(|| Error::Checkpoint("prune checkpoint has no continuation".into()))?;
    let mut net = ckpt.to_net()?;
    net.installed_mask = None;
    let records: Vec<EpochRecord> = serde_json::from_value(ckpt.state.get("records").cloned().unwrap_or_default())?;
    let step = ckpt.state.get("optim_step").and_then(|v| v.as_u64()).unwrap_or(0);
    let mut optim = OptimState { step, buffers: BTreeMap::new() };
    for a in &ckpt.arrays {
        let Some(rest) = a.name.strip_prefix("opt/") else { continue };
        let (slot, name) = rest
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("malformed optimizer array `{}`", a.name)))?;
        let slot: usize = slot.parse().map_err(|_| Error::Checkpoint(format!("malformed optimizer array `{}`", a.name)))?;
        let slots = optim.buffers.entry(name.to_string()).or_default();
        if slots.len() <= slot {
            slots.resize(slot + 1, Vec::new());
        }
        slots[slot] = a.data.clone();
    }
    let best = match (&ckpt.best, &ckpt.hard_mask) {
        (Some(metric), Some(mask)) => {
            let mut best_net = ckpt.net_with_prefix(BEST_PREFIX, &ckpt.architecture)?;
            best_net.installed_mask = Some(mask.clone());
            Some(BestSnapshot { epoch: metric.epoch, val_accuracy: metric.value, mask: mask.clone(), net: best_net })
        }
        _ => None,
    };
    let done = match continuation.epoch {
        0 => continuation,
        e => ContinuationState::at_epoch(continuation.schedule, e - 1),
    };
    let prune_cfg: PruneConfig = serde_json::from_value(ckpt.config["prune"].clone())?;
    net.masks.refresh(&done, &prune_cfg.projection);
    Ok(PruneState { net, continuation, optim, records, best })
}

fn prune_summary(state: &PruneState, cfg: &RunConfig, dir: &Path, mask_file: Option<PathBuf>) -> Result<PruneSummary> {
    let best = state.best.as_ref();
    Ok(PruneSummary {
        checkpoint: dir.join(PRUNE_CHECKPOINT),
        epochs_done: state.next_epoch(),
        complete: state.next_epoch() >= cfg.prune.epochs,
        best_epoch: best.map(|b| b.epoch),
        best_val_accuracy: best.map(|b| b.val_accuracy),
        kept_per_layer: best.map(|b| b.mask.kept_per_layer()),
        budgets: best.map(|b| mask_budgets(&b.mask, state.net.shape())).transpose()?,
        target: cfg.prune.target,
        final_crisp_fraction: state.records.last().map(|r| r.crisp_fraction),
        mask_file,
    })
}

/// Soft pruning from `pretrain` into `dir`, then selection of the best
/// hard mask.
fn run_prune(cfg: &RunConfig, pretrained: &Path, dir: &Path, opts: PruneOptions) -> Result<PruneSummary> {
    let data = load_data(cfg)?;
    let ckpt_path = dir.join(PRUNE_CHECKPOINT);
    let mut state = if opts.resume {
        let ckpt = load_checkpoint(&require(ckpt_path.clone(), "nothing to resume; run `prune` without --resume")?)?;
        if trajectory_key(&ckpt.config) != trajectory_key(&cfg.to_json()?) {
            return Err(Error::Config("configuration differs from the one the prune checkpoint was written with".into()));
        }
        prune_state_from_checkpoint(&ckpt)?
    } else {
        let pre = load_checkpoint(&require(pretrained.to_path_buf(), "run `pretrain` first")?)?;
        if pre.stage != "pretrain" {
            return Err(Error::Checkpoint(format!("{} holds stage `{}`, not pretrain", pretrained.display(), pre.stage)));
        }
        PruneState::start(pre.to_net()?, &cfg.prune, cfg.seed)?
    };
    soft_prune(&mut state, &data, &cfg.prune, opts.stop_after, |s| {
        save_checkpoint(&prune_checkpoint(s, cfg)?, &ckpt_path)?;
        write_file(&dir.join(PRUNE_CSV), epoch_records_csv(&s.records))
    })?;
    if state.next_epoch() == 0 {
        save_checkpoint(&prune_checkpoint(&state, cfg)?, &ckpt_path)?;
        write_file(&dir.join(PRUNE_CSV), epoch_records_csv(&state.records))?;
    }
    let complete = state.next_epoch() >= cfg.prune.epochs;
    let mut mask_file = None;
    if complete {
        let Some(best) = &state.best else {
            let layers = state.records.last().map(|r| r.fatal_layers.clone()).unwrap_or_default();
            return Err(Error::FatalPruning { layers });
        };
        let path = dir.join(MASK_FILE);
        export_mask(&best.mask, state.net.shape(), &path)?;
        mask_file = Some(path);
    }
    let summary = prune_summary(&state, cfg, dir, mask_file)?;
    write_json(&dir.join("prune_summary.json"), &summary)?;
    Ok(summary)
}

/// Soft-prunes the pretrained network in `out_dir`.
pub fn prune(cfg: &RunConfig, opts: PruneOptions) -> Result<PruneSummary> {
    cfg.validate()?;
    let summary = run_prune(cfg, &cfg.out_dir.join(PRETRAIN_CHECKPOINT), &cfg.out_dir, opts)?;
    write_manifest(cfg, "prune")?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneSummary {
    pub source: PathBuf,
    pub checkpoint: PathBuf,
    pub kept_per_layer: Vec<usize>,
    pub budgets: BTreeMap<BudgetKind, f64>,
    pub parameters_dense: usize,
    pub parameters_slim: usize,
    /// Slim network before the first finetuning epoch.
    pub initial: EvalResult,
    pub best_epoch: Option<usize>,
    pub best: EvalResult,
    pub records: Vec<TrainRecord>,
}

/// Network and hard mask held by a prune or transfer checkpoint.
fn masked_network(ckpt: &Checkpoint, path: &Path) -> Result<(MaskedNet, HardMask)> {
    let mask = ckpt
        .hard_mask
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no selected hard mask", path.display())))?;
    let net = match ckpt.stage.as_str() {
        "prune" => {
            if ckpt.state.get("complete").and_then(|v| v.as_bool()) != Some(true) {
                return Err(Error::Checkpoint(format!(
                    "{} is from an unfinished prune run; continue it with `prune --resume`",
                    path.display()
                )));
            }
            ckpt.net_with_prefix(BEST_PREFIX, &ckpt.architecture)?
        }
        "transfer" => ckpt.to_net()?,
        other => return Err(Error::Checkpoint(format!("{}: cannot finetune from stage `{other}`", path.display()))),
    };
    Ok((net, mask))
}

/// Materializes the selected mask and finetunes the slim network. The
/// source defaults to `prune.ckpt` in `out_dir`.
pub fn finetune(cfg: &RunConfig, source: Option<&Path>) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let source = match source {
        Some(p) => require(p.to_path_buf(), "pass a prune or transfer checkpoint")?,
        None => require(cfg.out_dir.join(PRUNE_CHECKPOINT), "run `prune` (or `transfer-mask`) first")?,
    };
    let ckpt = load_checkpoint(&source)?;
    let (net, mask) = masked_network(&ckpt, &source)?;
    let fatal = net.validate_connectivity(&mask)?;
    if !fatal.is_empty() {
        return Err(Error::FatalPruning { layers: fatal });
    }
    let data = load_data(cfg)?;
    let mut slim = net.materialize(&mask)?;
    if cfg.finetune.recalibrate_bn {
        recalibrate_bn(&mut slim, &data, MaskMode::Plain)?;
    }
    let out = train_plain(slim, &data, &cfg.finetune.train_config())?;
    let summary = FinetuneSummary {
        source,
        checkpoint: cfg.out_dir.join(FINETUNE_CHECKPOINT),
        kept_per_layer: mask.kept_per_layer(),
        budgets: mask_budgets(&mask, net.shape())?,
        parameters_dense: net.parameter_count(),
        parameters_slim: out.net.parameter_count(),
        initial: out.initial,
        best_epoch: out.best_epoch,
        best: out.best,
        records: out.records,
    };
    let mut ckpt = Checkpoint::from_net("finetune", &out.net, cfg.to_json()?);
    ckpt.best = summary.best_epoch.map(|epoch| BestMetric {
        epoch,
        metric: "val_accuracy".into(),
        value: summary.best.accuracy,
    });
    ckpt.state = json!({ "records": summary.records, "source_mask": mask, "budgets": summary.budgets });
    save_checkpoint(&ckpt, &summary.checkpoint)?;
    write_file(&cfg.out_dir.join(FINETUNE_CSV), train_records_csv(&summary.records))?;
    write_json(&cfg.out_dir.join("finetune_summary.json"), &summary)?;
    write_manifest(cfg, "finetune")?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub stage: String,
    /// `plain`, `hard` or `all-ones`.
    pub mask: String,
    pub kept_channels: usize,
    pub result: EvalResult,
}

/// Validation loss and accuracy of a checkpoint. Prune and transfer
/// checkpoints run with their hard mask; `all_ones` forces a full mask.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path, all_ones: bool) -> Result<EvalSummary> {
    cfg.validate()?;
    let path = require(path.to_path_buf(), "nothing to evaluate")?;
    let ckpt = load_checkpoint(&path)?;
    let data = load_data(cfg)?;
    let val = data.val_batches();
    let (mut net, mask) = match ckpt.stage.as_str() {
        "prune" | "transfer" if !all_ones => {
            let (net, mask) = masked_network(&ckpt, &path)?;
            (net, Some(mask))
        }
        _ => (ckpt.to_net()?, None),
    };
    let full = net.full_mask();
    let (label, mode, kept) = match (&mask, all_ones) {
        (_, true) => ("all-ones", MaskMode::Hard(&full), full.kept()),
        (Some(m), false) => ("hard", MaskMode::Hard(m), m.kept()),
        (None, false) => ("plain", MaskMode::Plain, full.kept()),
    };
    let result = evaluate(&mut net, &val, mode)?;
    let summary = EvalSummary { checkpoint: path, stage: ckpt.stage.clone(), mask: label.into(), kept_channels: kept, result };
    write_json(&cfg.out_dir.join("eval_summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the selected hard mask of a prune or transfer checkpoint.
pub fn export_selected_mask(checkpoint: &Path, out: &Path) -> Result<BTreeMap<BudgetKind, f64>> {
    let ckpt = load_checkpoint(&require(checkpoint.to_path_buf(), "run `prune` first")?)?;
    let mask = ckpt
        .hard_mask
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no selected hard mask", checkpoint.display())))?;
    export_mask(mask, &ckpt.shape, out)?;
    mask_budgets(mask, &ckpt.shape)
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferSummary {
    pub mask_file: PathBuf,
    pub checkpoint: PathBuf,
    pub host_fingerprint: String,
    pub kept_per_layer: Vec<usize>,
    /// Budgets recorded by the host run.
    pub host_budgets: BTreeMap<BudgetKind, f64>,
    /// Budgets of the mask on the target network.
    pub target_budgets: BTreeMap<BudgetKind, f64>,
    pub budget_preserved: bool,
}

/// Installs a mask file into the pretrained network of `out_dir` and writes
/// `transfer.ckpt`, ready for `finetune`.
pub fn transfer_mask_file(cfg: &RunConfig, mask_file: &Path) -> Result<TransferSummary> {
    cfg.validate()?;
    let pretrained = require(cfg.out_dir.join(PRETRAIN_CHECKPOINT), "run `pretrain` on the target data first")?;
    let pre = load_checkpoint(&pretrained)?;
    let net = pre.to_net()?;
    let imported = import_mask(mask_file, Some(net.shape()))?;
    let net = install_mask(&imported.mask, &imported.shape, net)?;
    let target_budgets = mask_budgets(&imported.mask, net.shape())?;
    let mut ckpt = Checkpoint::from_net("transfer", &net, cfg.to_json()?);
    ckpt.state = json!({ "mask_file": mask_file, "host_fingerprint": imported.fingerprint });
    let summary = TransferSummary {
        mask_file: mask_file.to_path_buf(),
        checkpoint: cfg.out_dir.join(TRANSFER_CHECKPOINT),
        host_fingerprint: imported.fingerprint,
        kept_per_layer: imported.mask.kept_per_layer(),
        budget_preserved: target_budgets == imported.recorded_budgets,
        host_budgets: imported.recorded_budgets,
        target_budgets,
    };
    save_checkpoint(&ckpt, &summary.checkpoint)?;
    write_json(&cfg.out_dir.join("transfer_summary.json"), &summary)?;
    write_manifest(cfg, "transfer-mask")?;
    Ok(summary)
}

/// Histogram counts of values in `[0, 1]` over equal-width bins; the last
/// bin is closed.
pub fn histogram(values: &[f32], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v as f64).clamp(0.0, 1.0) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// Fraction of values inside `[lo, hi]`.
pub fn fraction_within(values: &[f32], lo: f64, hi: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    // compare in f32 so that bounds stored as f32 count as inside
    let range = lo as f32..=hi as f32;
    values.iter().filter(|v| range.contains(v)).count() as f64 / values.len() as f64
}

/// Distance between the means of the optimal two-cluster split of
/// `values` (least within-cluster squared error). Zero for fewer than two
/// values.
pub fn two_cluster_gap(values: &[f32]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
        prefix_sq[i + 1] = prefix_sq[i] + x * x;
    }
    let sse = |a: usize, b: usize| {
        let (s, q, k) = (prefix[b] - prefix[a], prefix_sq[b] - prefix_sq[a], (b - a) as f64);
        q - s * s / k
    };
    let mut best = (f64::INFINITY, 0.0);
    for k in 1..n {
        let cost = sse(0, k) + sse(k, n);
        if cost < best.0 {
            let gap = (prefix[n] - prefix[k]) / (n - k) as f64 - prefix[k] / k as f64;
            best = (cost, gap);
        }
    }
    best.1
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub channels: usize,
    /// Fraction of final z in `[0.2, 0.8]`.
    pub mid_fraction: f64,
    pub crisp_fraction: f64,
    /// Gap between the two cluster means of the masks the budget saw.
    pub budget_mask_gap: f64,
    pub z_gap: f64,
}

/// Plot data of a prune run: z histograms, kept channels per layer,
/// projection curves and per-epoch loss components.
pub fn report(run_dir: &Path) -> Result<ReportSummary> {
    let ckpt_path = run_dir.join(PRUNE_CHECKPOINT);
    if !ckpt_path.is_file() {
        return Err(Error::MissingArtifacts { dir: run_dir.to_path_buf(), expected: vec![PRUNE_CHECKPOINT.into()] });
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let state = prune_state_from_checkpoint(&ckpt)?;
    let z = &state.net.masks.z;
    let z_bar = &state.net.masks.z_bar;
    let out = run_dir.join(REPORT_DIR);
    let mut files = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        write_file(&path, text)?;
        files.push(path);
        Ok(())
    };

    let (hz, hb) = (histogram(z, HISTOGRAM_BINS), histogram(z_bar, HISTOGRAM_BINS));
    let mut text = String::from("bin,lo,hi,z,z_bar\n");
    for b in 0..HISTOGRAM_BINS {
        let lo = b as f64 / HISTOGRAM_BINS as f64;
        let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
        let _ = writeln!(text, "{b},{lo},{hi},{},{}", hz[b], hb[b]);
    }
    emit("z_histogram.csv", text)?;

    let shape = state.net.shape().clone();
    let z64: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let psi: Vec<f64> = state.net.masks.psi.iter().map(|&v| v as f64).collect();
    let prune_cfg: PruneConfig = serde_json::from_value(ckpt.config["prune"].clone())?;
    let final_mask = if state.records.is_empty() {
        None
    } else {
        hard_prune_ranked(&z64, Some(&psi), prune_cfg.budget, prune_cfg.target, &shape).ok()
    };
    let best_kept = state.best.as_ref().map(|b| b.mask.kept_per_layer());
    let final_kept = final_mask.as_ref().map(|m| m.kept_per_layer());
    let mut text = String::from("layer,channels,kept_best,kept_final\n");
    for (j, layer) in shape.layers.iter().filter(|l| l.prunable).enumerate() {
        let pick = |k: &Option<Vec<usize>>| k.as_ref().map_or(String::new(), |k| k[j].to_string());
        let _ = writeln!(text, "{},{},{},{}", layer.index, layer.channels, pick(&best_kept), pick(&final_kept));
    }
    emit("channels_per_layer.csv", text)?;

    emit("projection_curves.csv", projection_curves_csv(101))?;

    let mut text = String::from("epoch,loss_total,loss_ce,loss_crispness,loss_budget,soft_budget,hard_budget\n");
    for r in &state.records {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss_total, r.loss_ce, r.loss_crispness, r.loss_budget, r.soft_budget, r.hard_budget
        );
    }
    emit("loss_curves.csv", text)?;

    let summary = ReportSummary {
        dir: out.clone(),
        files,
        channels: z.len(),
        mid_fraction: fraction_within(z, 0.2, 0.8),
        crisp_fraction: crisp_fraction(z),
        budget_mask_gap: two_cluster_gap(z_bar),
        z_gap: two_cluster_gap(z),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct GridResult {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_step: f64,
    pub gamma_double_every: usize,
    pub dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub hard_val_accuracy: Option<f64>,
    /// Error message when the run failed (e.g. fatal pruning).
    pub error: Option<String>,
}

/// Prunes the pretrained network once per grid point, each into
/// `out_dir/grid/point-<i>`, and tabulates hard-pruned validation accuracy.
pub fn grid(cfg: &RunConfig) -> Result<Vec<GridResult>> {
    cfg.validate()?;
    if cfg.grid.points.is_empty() {
        return Err(Error::Config("grid.points is empty".into()));
    }
    let pretrained = require(cfg.out_dir.join(PRETRAIN_CHECKPOINT), "run `pretrain` first")?;
    let mut results = Vec::new();
    for (i, p) in cfg.grid.points.iter().enumerate() {
        let mut point_cfg = cfg.clone();
        point_cfg.prune.alpha1 = p.alpha1;
        point_cfg.prune.alpha2 = p.alpha2;
        point_cfg.prune.schedule.beta_step = p.beta_step;
        point_cfg.prune.schedule.gamma_double_every = p.gamma_double_every;
        let dir = cfg.out_dir.join("grid").join(format!("point-{i}"));
        point_cfg.out_dir = dir.clone();
        let outcome = run_prune(&point_cfg, &pretrained, &dir, PruneOptions::default());
        let (best_epoch, acc, error) = match outcome {
            Ok(s) => (s.best_epoch, s.best_val_accuracy, None),
            Err(e @ (Error::FatalPruning { .. } | Error::Diverged { .. })) => (None, None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        results.push(GridResult {
            alpha1: p.alpha1,
            alpha2: p.alpha2,
            beta_step: p.beta_step,
            gamma_double_every: p.gamma_double_every,
            dir,
            best_epoch,
            hard_val_accuracy: acc,
            error,
        });
    }
    let mut text = String::from("alpha1,alpha2,beta_step,gamma_double_every,best_epoch,hard_val_accuracy,error\n");
    for r in &results {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.alpha1,
            r.alpha2,
            r.beta_step,
            r.gamma_double_every,
            opt(r.best_epoch.map(|e| e.to_string())),
            opt(r.hard_val_accuracy.map(|a| a.to_string())),
            opt(r.error.as_ref().map(|e| format!("\"{}\"", e.replace('"', "'")))),
        );
    }
    write_file(&cfg.out_dir.join("grid.csv"), text)?;
    write_manifest(cfg, "grid")?;
    Ok(results)
}
