//! Small CNNs whose post-batchnorm activations are scaled by channel masks.

mod arch;
mod materialize;
mod net;

pub use arch::{AddPart, Architecture, NodeDims, NodeSpec, Preset};
pub use net::{build_model, ForwardPass, GradTargets, MaskMode, MaskedNet, ModelConfig, Param, ParamStore, PSI_INIT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary keep/drop decision per prunable channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMask {
    layout: Vec<usize>,
    keep: Vec<bool>,
}

impl HardMask {
    pub fn new(layout: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        let total: usize = layout.iter().sum();
        if keep.len() != total {
            return Err(Error::Layout(format!("{} decisions for {total} channels", keep.len())));
        }
        Ok(HardMask { layout, keep })
    }

    pub fn all_kept(layout: Vec<usize>) -> Self {
        let total = layout.iter().sum();
        HardMask { layout, keep: vec![true; total] }
    }

    pub fn layout(&self) -> &[usize] {
        &self.layout
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn set(&mut self, index: usize, keep: bool) {
        self.keep[index] = keep;
    }

    /// Per-layer slices of the decisions.
    pub fn layers(&self) -> Vec<&[bool]> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut offset = 0;
        for &p in &self.layout {
            out.push(&self.keep[offset..offset + p]);
            offset += p;
        }
        out
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers().iter().map(|l| l.iter().filter(|&&k| k).count()).collect()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}
