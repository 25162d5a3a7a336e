use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, NodeDims, NodeSpec, Preset};
use super::HardMask;
use crate::budgets::NetworkShape;
use crate::error::{Error, Result};
use crate::ndgrad::{BnSettings, RunningStats, Tape, Tensor, Var};
use crate::projections::{ContinuationState, MaskSet, ProjectionConfig};

/// Default ψ initialization range; biases fresh masks towards 1.
pub const PSI_INIT: (f64, f64) = (2.5, 3.5);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        let name = name.into();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Channel widths; the preset's defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { preset: Preset::TinyCnn, widths: None }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| self.preset.default_widths())
    }
}

/// How channel masks are applied during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MaskMode<'a> {
    /// No mask multiplication at all.
    Plain,
    /// `z = heaviside(logistic(ψ))`, differentiable in ψ.
    Soft { state: ContinuationState, projection: ProjectionConfig },
    Hard(&'a HardMask),
    /// Arbitrary constant mask values, one per prunable channel.
    Fixed(&'a [f32]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GradTargets {
    pub weights: bool,
    pub psi: bool,
}

impl GradTargets {
    pub const NONE: GradTargets = GradTargets { weights: false, psi: false };
    pub const WEIGHTS: GradTargets = GradTargets { weights: true, psi: false };
    pub const ALL: GradTargets = GradTargets { weights: true, psi: true };
}

/// Handles produced by [`MaskedNet::forward`].
pub struct ForwardPass {
    pub logits: Var,
    /// One leaf per parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    pub psi: Option<Var>,
    pub z_tilde: Option<Var>,
    pub z: Option<Var>,
}

/// A CNN with one mask entry per hidden channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedNet {
    arch: Architecture,
    shape: Arc<NetworkShape>,
    dims: Vec<NodeDims>,
    pub params: ParamStore,
    /// Batchnorm running statistics keyed by node index.
    pub running: BTreeMap<usize, RunningStats>,
    pub masks: MaskSet,
    /// Hard mask installed by transfer or selected by pruning.
    pub installed_mask: Option<HardMask>,
}

pub(crate) fn conv_name(node: usize) -> String {
    format!("n{node}.weight")
}
pub(crate) fn gamma_name(node: usize) -> String {
    format!("n{node}.gamma")
}
pub(crate) fn beta_name(node: usize) -> String {
    format!("n{node}.beta")
}
pub(crate) const HEAD_WEIGHT: &str = "head.weight";
pub(crate) const HEAD_BIAS: &str = "head.bias";

pub fn build_model(cfg: &ModelConfig, input: [usize; 3], classes: usize, seed: u64) -> Result<MaskedNet> {
    let arch = cfg.preset.architecture(&cfg.widths(), input, classes)?;
    MaskedNet::initialize(arch, seed)
}

impl MaskedNet {
    /// Fresh weights: He-normal convolutions, unit batchnorm, uniform head.
    pub fn initialize(arch: Architecture, seed: u64) -> Result<Self> {
        let dims = arch.node_dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut running = BTreeMap::new();
        for (i, node) in arch.nodes.iter().enumerate() {
            if let NodeSpec::ConvBn { in_channels, out_channels, kernel, .. } = *node {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let n = out_channels * in_channels * kernel * kernel;
                let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                params.push(conv_name(i), Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?, true);
                params.push(gamma_name(i), Tensor::full(vec![out_channels], 1.0), true);
                params.push(beta_name(i), Tensor::zeros(vec![out_channels]), true);
                running.insert(i, RunningStats::new(out_channels));
            }
        }
        let feat = dims[arch.head_src].channels;
        let bound = 1.0 / (feat as f64).sqrt();
        let uni = Uniform::new(-bound, bound).expect("valid range");
        let w: Vec<f32> = (0..arch.classes * feat).map(|_| uni.sample(&mut rng) as f32).collect();
        params.push(HEAD_WEIGHT, Tensor::new(vec![arch.classes, feat], w)?, true);
        params.push(HEAD_BIAS, Tensor::zeros(vec![arch.classes]), true);
        let shape = arch.network_shape()?;
        let masks = MaskSet::random(shape.mask_layout(), PSI_INIT.0, PSI_INIT.1, &mut rng);
        Ok(MaskedNet { arch, shape: Arc::new(shape), dims, params, running, masks, installed_mask: None })
    }

    /// Assembles a network from stored parts, validating every tensor shape.
    pub fn from_parts(
        arch: Architecture,
        params: ParamStore,
        running: BTreeMap<usize, RunningStats>,
        psi: Vec<f32>,
    ) -> Result<Self> {
        let dims = arch.node_dims()?;
        let shape = arch.network_shape()?;
        for (i, node) in arch.nodes.iter().enumerate() {
            if let NodeSpec::ConvBn { in_channels, out_channels, kernel, .. } = *node {
                let expect = |name: String, shape: Vec<usize>| -> Result<()> {
                    match params.get(&name) {
                        Some(t) if t.shape() == shape.as_slice() => Ok(()),
                        Some(t) => Err(Error::Config(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))),
                        None => Err(Error::Config(format!("missing parameter `{name}`"))),
                    }
                };
                expect(conv_name(i), vec![out_channels, in_channels, kernel, kernel])?;
                expect(gamma_name(i), vec![out_channels])?;
                expect(beta_name(i), vec![out_channels])?;
                match running.get(&i) {
                    Some(r) if r.mean.len() == out_channels && r.var.len() == out_channels => {}
                    _ => return Err(Error::Config(format!("running statistics of node {i} missing or mis-sized"))),
                }
            }
        }
        let feat = dims[arch.head_src].channels;
        if params.get(HEAD_WEIGHT).map(|t| t.shape().to_vec()) != Some(vec![arch.classes, feat])
            || params.get(HEAD_BIAS).map(|t| t.shape().to_vec()) != Some(vec![arch.classes])
        {
            return Err(Error::Config("classifier parameters missing or mis-sized".into()));
        }
        let masks = MaskSet::from_psi(shape.mask_layout(), psi)?;
        Ok(MaskedNet { arch, shape: Arc::new(shape), dims, params, running, masks, installed_mask: None })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn shared_shape(&self) -> Arc<NetworkShape> {
        Arc::clone(&self.shape)
    }

    pub fn node_dims(&self) -> &[NodeDims] {
        &self.dims
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters of the masked convolutions and their batchnorms, the
    /// quantity the parameter budget measures.
    pub fn masked_parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.name.starts_with('n')).map(|p| p.tensor.numel()).sum()
    }

    /// Hard mask keeping every channel.
    pub fn full_mask(&self) -> HardMask {
        HardMask::all_kept(self.shape.mask_layout())
    }

    pub fn validate_connectivity(&self, mask: &HardMask) -> Result<Vec<usize>> {
        self.check_mask_layout(mask.layout())?;
        Ok(self.arch.validate_connectivity(mask))
    }

    pub(crate) fn check_mask_layout(&self, layout: &[usize]) -> Result<()> {
        let expected = self.shape.mask_layout();
        if layout != expected.as_slice() {
            return Err(Error::Layout(format!("mask layout {layout:?}, network expects {expected:?}")));
        }
        Ok(())
    }

    /// Records a forward pass. Returns the logits and the leaves that
    /// gradients can be read from.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mode: MaskMode<'_>,
        bn: BnSettings,
        grads: GradTargets,
    ) -> Result<ForwardPass> {
        let [_, c, h, w] = x.dims4("forward")?;
        if [c, h, w] != self.arch.input {
            return Err(Error::shape(
                "forward",
                format!("input samples are {:?}, network expects {:?}", [c, h, w], self.arch.input),
            ));
        }
        let param_vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(grads.weights)))
            .collect::<Result<Vec<_>>>()?;
        let var_of = |store: &ParamStore, name: &str| -> Result<Var> { Ok(param_vars[store.require(name)?]) };

        let (mut psi, mut z_tilde, mut z_var) = (None, None, None);
        let masks: Option<Var> = match mode {
            MaskMode::Plain => None,
            MaskMode::Soft { state, projection } => {
                let p = tape.leaf(Tensor::from_vec(self.masks.psi.clone()).with_requires_grad(grads.psi))?;
                let zt = tape.logistic(p, state.beta, projection.psi_midpoint)?;
                let z = if projection.heaviside { tape.heaviside(zt, state.gamma)? } else { zt };
                psi = Some(p);
                z_tilde = Some(zt);
                z_var = Some(z);
                Some(z)
            }
            MaskMode::Hard(mask) => {
                self.check_mask_layout(mask.layout())?;
                let values = mask.keep().iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                Some(tape.constant(Tensor::from_vec(values))?)
            }
            MaskMode::Fixed(values) => {
                if values.len() != self.masks.len() {
                    return Err(Error::Layout(format!("{} mask values for {} channels", values.len(), self.masks.len())));
                }
                Some(tape.constant(Tensor::from_vec(values.to_vec()))?)
            }
        };

        let x_var = tape.constant(x.clone())?;
        let mut outs: Vec<Var> = Vec::with_capacity(self.arch.nodes.len());
        for (i, node) in self.arch.nodes.iter().enumerate() {
            let out = match node {
                NodeSpec::Input => x_var,
                NodeSpec::ConvBn { src, stride, padding, layer, relu, .. } => {
                    let wv = var_of(&self.params, &conv_name(i))?;
                    let gv = var_of(&self.params, &gamma_name(i))?;
                    let bv = var_of(&self.params, &beta_name(i))?;
                    let y = tape.conv2d(outs[*src], wv, *stride, *padding)?;
                    let stats = self.running.get_mut(&i).expect("validated at construction");
                    let mut y = tape.batchnorm2d(y, gv, bv, stats, bn)?;
                    if let Some(all) = masks {
                        let r = self.masks.layer_range(*layer);
                        let m = tape.slice(all, r.start, r.len())?;
                        y = tape.channel_scale(y, m)?;
                    }
                    if *relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                NodeSpec::Add { parts, channels, relu, .. } => {
                    let parts = parts.iter().map(|p| (outs[p.src], p.index.clone())).collect();
                    let y = tape.scatter_add(parts, *channels)?;
                    if *relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
            };
            outs.push(out);
        }
        let pooled = tape.global_avg_pool(outs[self.arch.head_src])?;
        let logits = tape.linear(pooled, var_of(&self.params, HEAD_WEIGHT)?, var_of(&self.params, HEAD_BIAS)?)?;
        Ok(ForwardPass { logits, params: param_vars, psi, z_tilde, z: z_var })
    }

    /// Eval-mode logits without gradient bookkeeping.
    pub fn predict(&mut self, x: &Tensor, mode: MaskMode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bn = BnSettings { mode: crate::ndgrad::BnMode::Eval, ..BnSettings::default() };
        let pass = self.forward(&mut tape, x, mode, bn, GradTargets::NONE)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Replaces ψ, keeping the layout.
    pub fn set_psi(&mut self, psi: Vec<f32>) -> Result<()> {
        self.masks = MaskSet::from_psi(self.shape.mask_layout(), psi)?;
        Ok(())
    }
}
