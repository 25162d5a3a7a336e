use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budgets::NetworkShape;
use crate::error::{Error, Result};
use crate::models::{Architecture, HardMask, MaskedNet, ParamStore};
use crate::ndgrad::{RunningStats, Tensor};
use crate::projections::ContinuationState;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CHPNCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const PSI_ARRAY: &str = "masks.psi";

/// A named little-endian f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// Everything persisted for one pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Stage that produced the file (`pretrain`, `prune`, ...).
    pub stage: String,
    /// Snapshot of the resolved run configuration.
    pub config: serde_json::Value,
    pub architecture: Architecture,
    pub shape: NetworkShape,
    pub continuation: Option<ContinuationState>,
    pub best: Option<BestMetric>,
    pub hard_mask: Option<HardMask>,
    /// Stage-specific metadata such as epoch records or optimizer counters.
    pub state: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Number of elements.
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    stage: String,
    config: serde_json::Value,
    architecture: Architecture,
    shape: NetworkShape,
    continuation: Option<ContinuationState>,
    best: Option<BestMetric>,
    hard_mask: Option<HardMask>,
    state: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Snapshot of a network: parameters, batchnorm statistics and ψ.
    pub fn from_net(stage: &str, net: &MaskedNet, config: serde_json::Value) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            config,
            architecture: net.architecture().clone(),
            shape: net.shape().clone(),
            continuation: None,
            best: None,
            hard_mask: net.installed_mask.clone(),
            state: serde_json::Value::Null,
            arrays: net_arrays(net, ""),
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Adds the arrays of `net` under `prefix` (e.g. `best/`).
    pub fn push_net(&mut self, prefix: &str, net: &MaskedNet) {
        self.arrays.extend(net_arrays(net, prefix));
    }

    /// Rebuilds the network stored without prefix.
    pub fn to_net(&self) -> Result<MaskedNet> {
        self.net_with_prefix("", &self.architecture)
    }

    /// Rebuilds a network from arrays stored under `prefix`.
    pub fn net_with_prefix(&self, prefix: &str, arch: &Architecture) -> Result<MaskedNet> {
        let mut params = ParamStore::default();
        let mut running: BTreeMap<usize, RunningStats> = BTreeMap::new();
        let mut psi = None;
        for a in self.arrays.iter() {
            let Some(name) = a.name.strip_prefix(prefix) else { continue };
            if name.contains('/') {
                continue;
            }
            if name == PSI_ARRAY {
                psi = Some(a.data.clone());
            } else if let Some(node) = name.strip_suffix(".running_mean") {
                running.entry(node_index(node)?).or_insert_with(|| RunningStats::new(0)).mean = a.data.clone();
            } else if let Some(node) = name.strip_suffix(".running_var") {
                running.entry(node_index(node)?).or_insert_with(|| RunningStats::new(0)).var = a.data.clone();
            } else if name.starts_with('n') || name.starts_with("head.") {
                params.push(name, Tensor::new(a.shape.clone(), a.data.clone())?, true);
            }
        }
        let psi = psi.ok_or_else(|| Error::Checkpoint(format!("missing array `{prefix}{PSI_ARRAY}`")))?;
        let mut net = MaskedNet::from_parts(arch.clone(), params, running, psi)?;
        if prefix.is_empty() {
            net.installed_mask = self.hard_mask.clone();
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array `{}` shape does not match its data", a.name)));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: "f32".into(),
                shape: a.shape.clone(),
                offset,
                length: a.data.len() as u64,
            });
            offset += 4 * a.data.len() as u64;
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            stage: self.stage.clone(),
            config: self.config.clone(),
            architecture: self.architecture.clone(),
            shape: self.shape.clone(),
            continuation: self.continuation,
            best: self.best.clone(),
            hard_mask: self.hard_mask.clone(),
            state: self.state.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Checkpoint(format!("header length {header_len} exceeds file size")))?
            as usize;
        let value: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "format version {version:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut expected = 0u64;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("array `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.shape.iter().product::<usize>() as u64 != e.length {
                return Err(Error::Checkpoint(format!("array `{}` shape disagrees with its length", e.name)));
            }
            if e.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "array `{}` starts at byte {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let end = e.offset + 4 * e.length;
            if end > payload.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "size mismatch: array `{}` needs payload bytes up to {end}, file holds {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray { name: e.name, shape: e.shape, data });
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "size mismatch: directory covers {expected} payload bytes, file holds {}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            stage: header.stage,
            config: header.config,
            architecture: header.architecture,
            shape: header.shape,
            continuation: header.continuation,
            best: header.best,
            hard_mask: header.hard_mask,
            state: header.state,
            arrays,
        })
    }
}

fn node_index(name: &str) -> Result<usize> {
    name.strip_prefix('n')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("unrecognised array name `{name}`")))
}

fn net_arrays(net: &MaskedNet, prefix: &str) -> Vec<NamedArray> {
    let mut out = Vec::new();
    for p in net.params.iter() {
        out.push(NamedArray {
            name: format!("{prefix}{}", p.name),
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.data().to_vec(),
        });
    }
    for (node, stats) in &net.running {
        out.push(NamedArray {
            name: format!("{prefix}n{node}.running_mean"),
            shape: vec![stats.mean.len()],
            data: stats.mean.clone(),
        });
        out.push(NamedArray {
            name: format!("{prefix}n{node}.running_var"),
            shape: vec![stats.var.len()],
            data: stats.var.clone(),
        });
    }
    out.push(NamedArray { name: format!("{prefix}{PSI_ARRAY}"), shape: vec![net.masks.len()], data: net.masks.psi.clone() });
    out
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
