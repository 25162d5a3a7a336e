//! Run configuration read from TOML files.
//!
//! Every key has a default except `out_dir` and the data source
//! (`[data.synth]` or `[data.idx]`). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::pruner::{PruneConfig, SgdConfig, TrainConfig};

/// Seeded synthetic blob images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { classes: 10, samples_per_class: 60, image_size: 16, noise: 0.1 }
    }
}

/// A pair of IDX files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxConfig>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_batch_size() -> usize {
    8
}

impl DataConfig {
    pub fn synth(cfg: SynthConfig) -> Self {
        DataConfig { synth: Some(cfg), idx: None, val_fraction: default_val_fraction(), batch_size: default_batch_size() }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synth, &self.idx) {
            (Some(_), Some(_)) => return Err(Error::Config("data: give either [data.synth] or [data.idx], not both".into())),
            (None, None) => return Err(Error::Config("data: a source is required ([data.synth] or [data.idx])".into())),
            _ => {}
        }
        if let Some(s) = &self.synth {
            if s.classes < 2 || s.samples_per_class == 0 || s.image_size == 0 || s.noise < 0.0 {
                return Err(Error::Config(
                    "data.synth needs classes >= 2, positive samples_per_class and image_size, noise >= 0".into(),
                ));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Finetuning of the materialized slim network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub bn_momentum: f64,
    /// Recompute batchnorm running statistics over the train split before
    /// finetuning starts.
    pub recalibrate_bn: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 30, sgd: SgdConfig::default(), bn_momentum: 0.1, recalibrate_bn: true }
    }
}

impl FinetuneConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs, sgd: self.sgd, bn_momentum: self.bn_momentum }
    }
}

/// One (α1, α2, β step, γ period) tuple of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_step: f64,
    pub gamma_double_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points: Vec<GridPoint>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let point = |alpha1, alpha2, gamma_double_every| GridPoint { alpha1, alpha2, beta_step: 0.1, gamma_double_every };
        GridConfig { points: vec![point(10.0, 30.0, 2), point(5.0, 30.0, 2), point(10.0, 15.0, 2), point(10.0, 30.0, 4)] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

fn default_seed() -> u64 {
    7
}

fn default_pretrain() -> TrainConfig {
    TrainConfig::default()
}

impl RunConfig {
    /// Defaults around the two required entries.
    pub fn new(out_dir: impl Into<PathBuf>, data: DataConfig) -> Self {
        RunConfig {
            out_dir: out_dir.into(),
            seed: default_seed(),
            data,
            model: ModelConfig::default(),
            pretrain: default_pretrain(),
            prune: PruneConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: GridConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        self.data.validate()?;
        self.pretrain.validate()?;
        self.prune.validate()?;
        self.finetune.train_config().validate()?;
        for p in &self.grid.points {
            if p.alpha1 < 0.0 || p.alpha2 < 0.0 || p.beta_step < 0.0 || p.gamma_double_every == 0 {
                return Err(Error::Config(format!("invalid grid point {p:?}")));
            }
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_table(doc)
    }

    fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` entry of a JSON run manifest.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value = serde_json::from_str(&text)?;
            let config = manifest
                .get("config")
                .ok_or_else(|| Error::Config(format!("{}: manifest has no `config` entry", path.display())))?;
            let toml_text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
            return Self::from_toml_str(&toml_text, overrides);
        }
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn classes(&self) -> Option<usize> {
        self.data.synth.as_ref().map(|s| s.classes)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words such as `flops` are taken as strings
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key such as `prune.target=0.25` in a TOML table.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Every configuration key with its default value, flattened to dotted
/// names. `out_dir` and the data source are listed as required.
pub fn config_keys() -> Vec<(String, String)> {
    let mut cfg = RunConfig::new("<required>", DataConfig::synth(SynthConfig::default()));
    cfg.data.idx = Some(IdxConfig { images: "<required with idx>".into(), labels: "<required with idx>".into() });
    let value = toml::Value::try_from(&cfg).expect("config serializes");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    for (key, value) in out.iter_mut() {
        if key.starts_with("data.synth.") {
            *value = format!("{value} (with [data.synth])");
        }
    }
    out
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
