use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budgets::{BudgetKind, NetworkShape};
use crate::error::{Error, Result};
use crate::models::HardMask;

pub const MASK_FORMAT: &str = "chipnet-mask";
pub const MASK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskLayer {
    pub layer: usize,
    pub channels: usize,
    pub kept: usize,
    /// One character per channel, `1` for kept.
    pub bits: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDocument {
    format: String,
    version: u32,
    fingerprint: String,
    /// The shape the mask was learned on, in its text description form.
    shape: String,
    layers: Vec<MaskLayer>,
    budgets: BTreeMap<BudgetKind, f64>,
}

/// Contents of a mask file after validation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportedMask {
    pub mask: HardMask,
    pub shape: NetworkShape,
    pub fingerprint: String,
    /// Budgets recomputed from the bits, for every kind.
    pub budgets: BTreeMap<BudgetKind, f64>,
    /// Budgets as written in the file.
    pub recorded_budgets: BTreeMap<BudgetKind, f64>,
}

pub fn mask_budgets(mask: &HardMask, shape: &NetworkShape) -> Result<BTreeMap<BudgetKind, f64>> {
    let values = mask.values();
    BudgetKind::ALL.iter().map(|&k| Ok((k, k.evaluate(shape, &values)?))).collect()
}

pub fn mask_to_string(mask: &HardMask, shape: &NetworkShape) -> Result<String> {
    if mask.layout() != shape.mask_layout().as_slice() {
        return Err(Error::Layout(format!("mask layout {:?} does not fit the shape", mask.layout())));
    }
    let layers = shape
        .layers
        .iter()
        .filter(|l| l.prunable)
        .zip(mask.layers())
        .map(|(spec, bits)| MaskLayer {
            layer: spec.index,
            channels: bits.len(),
            kept: bits.iter().filter(|&&b| b).count(),
            bits: bits.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        })
        .collect();
    let doc = MaskDocument {
        format: MASK_FORMAT.into(),
        version: MASK_FORMAT_VERSION,
        fingerprint: shape.fingerprint(),
        shape: shape.description(),
        layers,
        budgets: mask_budgets(mask, shape)?,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Parses a mask file. When `expected` is given its fingerprint must match
/// the file's.
pub fn mask_from_str(text: &str, expected: Option<&NetworkShape>) -> Result<ImportedMask> {
    let doc: MaskDocument = serde_json::from_str(text)?;
    if doc.format != MASK_FORMAT || doc.version != MASK_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported mask file {} v{}", doc.format, doc.version)));
    }
    let shape = NetworkShape::from_description(&doc.shape)?;
    if shape.fingerprint() != doc.fingerprint {
        return Err(Error::ShapeMismatch("fingerprint does not match the embedded shape description".into()));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != doc.fingerprint {
            let diff = shape.diff(exp);
            return Err(Error::ShapeMismatch(format!("mask was learned on a different network: {}", diff.join("; "))));
        }
    }
    let layout = shape.mask_layout();
    if doc.layers.len() != layout.len() {
        return Err(Error::Layout(format!("{} layer entries for {} prunable layers", doc.layers.len(), layout.len())));
    }
    let mut keep = Vec::with_capacity(shape.mask_len());
    for (entry, &p) in doc.layers.iter().zip(&layout) {
        if entry.bits.chars().count() != p {
            return Err(Error::Layout(format!("layer {} lists {} bits for {p} channels", entry.layer, entry.bits.len())));
        }
        for ch in entry.bits.chars() {
            keep.push(match ch {
                '1' => true,
                '0' => false,
                other => return Err(Error::Config(format!("layer {}: invalid bit {other:?}", entry.layer))),
            });
        }
    }
    let mask = HardMask::new(layout, keep)?;
    Ok(ImportedMask {
        budgets: mask_budgets(&mask, &shape)?,
        recorded_budgets: doc.budgets,
        mask,
        shape,
        fingerprint: doc.fingerprint,
    })
}

pub fn export_mask(mask: &HardMask, shape: &NetworkShape, path: &Path) -> Result<()> {
    std::fs::write(path, mask_to_string(mask, shape)?).map_err(|e| Error::io(path, e))
}

pub fn import_mask(path: &Path, expected: Option<&NetworkShape>) -> Result<ImportedMask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mask_from_str(&text, expected)
}
