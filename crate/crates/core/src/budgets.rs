//! Resource budgets of a masked network as fractions of the dense network.
//!
//! Mask vectors cover the prunable layers of a [`NetworkShape`] in layer
//! order. Non-prunable layers and the network input count as fully kept.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Static metadata of one masked layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    /// Output channels `p_j`.
    pub channels: usize,
    /// Pixels of one output feature map `A_j`.
    pub feature_area: usize,
    /// Pixels of one kernel `K_j`.
    pub kernel_area: usize,
    /// Layer supplying the input channels; `None` for the network input.
    pub pred: Option<usize>,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkShape {
    pub fn new(input_channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let shape = NetworkShape { input_channels, layers };
        shape.validate()?;
        Ok(shape)
    }

    /// Chain of layers where layer `j` reads from layer `j - 1`.
    pub fn chain(input_channels: usize, layers: &[(usize, usize, usize)]) -> Result<Self> {
        let specs = layers
            .iter()
            .enumerate()
            .map(|(j, &(channels, feature_area, kernel_area))| LayerSpec {
                index: j,
                channels,
                feature_area,
                kernel_area,
                pred: j.checked_sub(1),
                prunable: true,
            })
            .collect();
        Self::new(input_channels, specs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("network input needs at least one channel".into()));
        }
        for (pos, l) in self.layers.iter().enumerate() {
            if l.index != pos {
                return Err(Error::Config(format!("layer at position {pos} has index {}", l.index)));
            }
            if l.channels == 0 || l.feature_area == 0 || l.kernel_area == 0 {
                return Err(Error::Config(format!("layer {pos} has a zero extent")));
            }
            if let Some(p) = l.pred {
                if p >= pos {
                    return Err(Error::Config(format!("layer {pos} reads from later layer {p}")));
                }
            }
        }
        Ok(())
    }

    /// Channel counts of the prunable layers, i.e. the mask layout.
    pub fn mask_layout(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.channels).collect()
    }

    pub fn mask_len(&self) -> usize {
        self.mask_layout().iter().sum()
    }

    /// Total hidden channels `p`.
    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }

    /// For every layer, the range of its entries in a mask vector.
    pub fn mask_ranges(&self) -> Vec<Option<std::ops::Range<usize>>> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                l.prunable.then(|| {
                    let r = offset..offset + l.channels;
                    offset += l.channels;
                    r
                })
            })
            .collect()
    }

    /// Per-layer kept mass `Σ z̄` (channel count for non-prunable layers).
    pub fn layer_sums(&self, masks: &[f64]) -> Result<Vec<f64>> {
        let expected = self.mask_len();
        if masks.len() != expected {
            return Err(Error::Layout(format!("{} mask values for {expected} prunable channels", masks.len())));
        }
        Ok(self
            .layers
            .iter()
            .zip(self.mask_ranges())
            .map(|(l, r)| match r {
                Some(r) => masks[r].iter().sum(),
                None => l.channels as f64,
            })
            .collect())
    }

    fn pred_sum(&self, sums: &[f64], layer: &LayerSpec) -> f64 {
        match layer.pred {
            Some(p) => sums[p],
            None => self.input_channels as f64,
        }
    }

    /// Human-readable layer table, parseable by [`NetworkShape::from_description`].
    pub fn description(&self) -> String {
        let mut out = String::from("# chipnet network shape v1\n");
        out.push_str(&format!("input_channels {}\n", self.input_channels));
        out.push_str("j\tp\tA\tK\tpred\tprunable\n");
        for l in &self.layers {
            let pred = l.pred.map_or_else(|| "input".to_string(), |p| p.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                l.index, l.channels, l.feature_area, l.kernel_area, pred, l.prunable
            ));
        }
        out
    }

    pub fn from_description(text: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut input_channels = None;
        let mut layers = Vec::new();
        let mut saw_header = false;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::Parse { offset: here, detail };
            if let Some(rest) = line.strip_prefix("input_channels") {
                input_channels =
                    Some(rest.trim().parse::<usize>().map_err(|e| bad(format!("input_channels: {e}")))?);
                continue;
            }
            if line.starts_with("j\t") || line.starts_with("j ") {
                saw_header = true;
                continue;
            }
            if !saw_header {
                return Err(bad(format!("unexpected line `{line}` before the layer table header")));
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns, found {}", cols.len())));
            }
            let num = |i: usize| cols[i].parse::<usize>().map_err(|e| bad(format!("column {i}: {e}")));
            let pred = match cols[4] {
                "input" => None,
                s => Some(s.parse::<usize>().map_err(|e| bad(format!("pred: {e}")))?),
            };
            let prunable = cols[5].parse::<bool>().map_err(|e| bad(format!("prunable: {e}")))?;
            layers.push(LayerSpec {
                index: num(0)?,
                channels: num(1)?,
                feature_area: num(2)?,
                kernel_area: num(3)?,
                pred,
                prunable,
            });
        }
        let input_channels = input_channels.ok_or(Error::Parse { offset: 0, detail: "missing input_channels".into() })?;
        Self::new(input_channels, layers)
    }

    /// SHA-256 of the layer table, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.description().as_bytes()))
    }

    /// Human-readable list of layers that differ from `other`.
    pub fn diff(&self, other: &NetworkShape) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_channels != other.input_channels {
            out.push(format!("input channels {} vs {}", self.input_channels, other.input_channels));
        }
        if self.layers.len() != other.layers.len() {
            out.push(format!("{} layers vs {}", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a != b {
                out.push(format!(
                    "layer {}: (p={}, A={}, K={}, pred={:?}) vs (p={}, A={}, K={}, pred={:?})",
                    a.index, a.channels, a.feature_area, a.kernel_area, a.pred, b.channels, b.feature_area,
                    b.kernel_area, b.pred
                ));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetKind {
    Channel,
    Volume,
    Parameter,
    Flops,
}

impl BudgetKind {
    pub const ALL: [BudgetKind; 4] = [BudgetKind::Channel, BudgetKind::Volume, BudgetKind::Parameter, BudgetKind::Flops];

    pub fn evaluate(self, shape: &NetworkShape, masks: &[f64]) -> Result<f64> {
        let sums = shape.layer_sums(masks)?;
        let (num, den) = self.fraction(shape, &sums);
        Ok(num / den)
    }

    /// Numerator and denominator of the budget for per-layer kept masses.
    fn fraction(self, shape: &NetworkShape, sums: &[f64]) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for l in &shape.layers {
            let s = sums[l.index];
            let p = l.channels as f64;
            let a = l.feature_area as f64;
            let k = l.kernel_area as f64;
            let s_in = shape.pred_sum(sums, l);
            let p_in = match l.pred {
                Some(q) => shape.layers[q].channels as f64,
                None => shape.input_channels as f64,
            };
            match self {
                BudgetKind::Channel => {
                    num += s;
                    den += p;
                }
                BudgetKind::Volume => {
                    num += a * s;
                    den += a * p;
                }
                BudgetKind::Parameter => {
                    num += k * s * s_in + 2.0 * s;
                    den += k * p * p_in + 2.0 * p;
                }
                BudgetKind::Flops => {
                    num += (k * s_in + 1.0) * s * a;
                    den += (k * p_in + 1.0) * p * a;
                }
            }
        }
        (num, den)
    }

    /// Gradient of the budget with respect to every mask entry.
    pub fn gradient(self, shape: &NetworkShape, masks: &[f64]) -> Result<Vec<f64>> {
        let sums = shape.layer_sums(masks)?;
        let (_, den) = self.fraction(shape, &sums);
        // d numerator / d S_j for every layer j
        let mut d_sum = vec![0.0f64; shape.layers.len()];
        for l in &shape.layers {
            let j = l.index;
            let a = l.feature_area as f64;
            let k = l.kernel_area as f64;
            let s = sums[j];
            let s_in = shape.pred_sum(&sums, l);
            match self {
                BudgetKind::Channel => d_sum[j] += 1.0,
                BudgetKind::Volume => d_sum[j] += a,
                BudgetKind::Parameter => {
                    d_sum[j] += k * s_in + 2.0;
                    if let Some(q) = l.pred {
                        d_sum[q] += k * s;
                    }
                }
                BudgetKind::Flops => {
                    d_sum[j] += (k * s_in + 1.0) * a;
                    if let Some(q) = l.pred {
                        d_sum[q] += k * s * a;
                    }
                }
            }
        }
        let mut grad = vec![0.0f64; masks.len()];
        for (l, r) in shape.layers.iter().zip(shape.mask_ranges()) {
            if let Some(r) = r {
                grad[r].iter_mut().for_each(|g| *g = d_sum[l.index] / den);
            }
        }
        Ok(grad)
    }
}

impl fmt::Display for BudgetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetKind::Channel => "channel",
            BudgetKind::Volume => "volume",
            BudgetKind::Parameter => "parameter",
            BudgetKind::Flops => "flops",
        })
    }
}

impl FromStr for BudgetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(BudgetKind::Channel),
            "volume" => Ok(BudgetKind::Volume),
            "parameter" => Ok(BudgetKind::Parameter),
            "flops" => Ok(BudgetKind::Flops),
            other => Err(Error::Config(format!(
                "unknown budget kind `{other}` (expected channel|volume|parameter|flops)"
            ))),
        }
    }
}

pub fn channel_budget(z_bar: &[f64], shape: &NetworkShape) -> Result<f64> {
    BudgetKind::Channel.evaluate(shape, z_bar)
}

pub fn volume_budget(z_bar: &[f64], shape: &NetworkShape) -> Result<f64> {
    BudgetKind::Volume.evaluate(shape, z_bar)
}

pub fn parameter_budget(z_bar: &[f64], shape: &NetworkShape) -> Result<f64> {
    BudgetKind::Parameter.evaluate(shape, z_bar)
}

pub fn flops_budget(z_bar: &[f64], shape: &NetworkShape) -> Result<f64> {
    BudgetKind::Flops.evaluate(shape, z_bar)
}

pub fn validate_target(target: f64) -> Result<()> {
    if target > 0.0 && target <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("budget target {target} must lie in (0, 1]")))
    }
}

/// `(value - target)²`.
pub fn budget_loss(value: f64, target: f64) -> Result<f64> {
    validate_target(target)?;
    Ok((value - target) * (value - target))
}
