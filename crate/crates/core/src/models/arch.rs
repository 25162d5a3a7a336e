use serde::{Deserialize, Serialize};

use super::HardMask;
use crate::budgets::{LayerSpec, NetworkShape};
use crate::error::{Error, Result};
use crate::ndgrad::kernels::ConvGeom;

/// One input of a residual sum: channel `k` of `src` lands on output
/// channel `index[k]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddPart {
    pub src: usize,
    pub index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeSpec {
    Input,
    /// Convolution, batchnorm, channel mask, optional ReLU. `layer` is the
    /// index of the mask slot and of the matching [`LayerSpec`].
    ConvBn {
        src: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        layer: usize,
        relu: bool,
    },
    /// Residual sum. `main` selects the part whose source layer stands in
    /// as predecessor for budget purposes.
    Add { parts: Vec<AddPart>, channels: usize, main: usize, relu: bool },
}

/// Directed acyclic graph of a masked CNN in topological order, followed by
/// global average pooling and a linear classifier reading `head_src`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: String,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub nodes: Vec<NodeSpec>,
    pub head_src: usize,
}

/// Output channels and spatial extent of every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Architecture {
    pub fn node_dims(&self) -> Result<Vec<NodeDims>> {
        let mut dims: Vec<NodeDims> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let d = match node {
                NodeSpec::Input => {
                    if i != 0 {
                        return Err(Error::Config("the input must be node 0".into()));
                    }
                    NodeDims { channels: self.input[0], height: self.input[1], width: self.input[2] }
                }
                NodeSpec::ConvBn { src, in_channels, out_channels, kernel, stride, padding, .. } => {
                    let s = dims.get(*src).ok_or_else(|| Error::Config(format!("node {i} reads from later node {src}")))?;
                    if s.channels != *in_channels {
                        return Err(Error::Config(format!(
                            "node {i} expects {in_channels} input channels, source has {}",
                            s.channels
                        )));
                    }
                    let h = ConvGeom::out_extent(s.height, *kernel, *stride, *padding);
                    let w = ConvGeom::out_extent(s.width, *kernel, *stride, *padding);
                    match (h, w) {
                        (Some(height), Some(width)) => NodeDims { channels: *out_channels, height, width },
                        _ => return Err(Error::Config(format!("node {i}: kernel does not fit its input"))),
                    }
                }
                NodeSpec::Add { parts, channels, main, .. } => {
                    if parts.is_empty() || *main >= parts.len() {
                        return Err(Error::Config(format!("node {i}: malformed residual sum")));
                    }
                    let mut hw = None;
                    for p in parts {
                        let s = dims.get(p.src).ok_or_else(|| Error::Config(format!("node {i} reads from later node")))?;
                        if s.channels != p.index.len() || p.index.iter().any(|&k| k >= *channels) {
                            return Err(Error::Config(format!("node {i}: channel map does not match its source")));
                        }
                        match hw {
                            None => hw = Some((s.height, s.width)),
                            Some(prev) if prev != (s.height, s.width) => {
                                return Err(Error::Config(format!("node {i}: summands differ in spatial size")))
                            }
                            _ => {}
                        }
                    }
                    let (height, width) = hw.expect("non-empty parts");
                    NodeDims { channels: *channels, height, width }
                }
            };
            dims.push(d);
        }
        if self.head_src >= self.nodes.len() {
            return Err(Error::Config("classifier reads from a missing node".into()));
        }
        Ok(dims)
    }

    /// `(node index, layer index)` of every masked convolution, ordered by layer.
    pub fn masked_nodes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                NodeSpec::ConvBn { layer, .. } => Some((i, *layer)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|&(_, l)| l);
        out
    }

    /// Layer whose channels a node outputs, following residual sums
    /// through their designated main part.
    pub fn source_layer(&self, node: usize) -> Option<usize> {
        match &self.nodes[node] {
            NodeSpec::Input => None,
            NodeSpec::ConvBn { layer, .. } => Some(*layer),
            NodeSpec::Add { parts, main, .. } => self.source_layer(parts[*main].src),
        }
    }

    pub fn network_shape(&self) -> Result<NetworkShape> {
        let dims = self.node_dims()?;
        let layers = self
            .masked_nodes()
            .into_iter()
            .enumerate()
            .map(|(pos, (i, layer))| {
                if pos != layer {
                    return Err(Error::Config(format!("mask slots are not contiguous at layer {pos}")));
                }
                let NodeSpec::ConvBn { src, kernel, .. } = &self.nodes[i] else { unreachable!() };
                Ok(LayerSpec {
                    index: layer,
                    channels: dims[i].channels,
                    feature_area: dims[i].height * dims[i].width,
                    kernel_area: kernel * kernel,
                    pred: self.source_layer(*src),
                    prunable: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkShape::new(self.input[0], layers)
    }

    /// Nodes that carry signal from the input under `kept` channels per layer.
    pub(crate) fn live_nodes(&self, kept_per_layer: &[usize]) -> Vec<bool> {
        let mut alive = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            alive[i] = match node {
                NodeSpec::Input => true,
                NodeSpec::ConvBn { src, layer, .. } => alive[*src] && kept_per_layer[*layer] > 0,
                NodeSpec::Add { parts, .. } => parts.iter().any(|p| alive[p.src]),
            };
        }
        alive
    }

    fn sources(&self, node: usize) -> Vec<usize> {
        match &self.nodes[node] {
            NodeSpec::Input => Vec::new(),
            NodeSpec::ConvBn { src, .. } => vec![*src],
            NodeSpec::Add { parts, .. } => parts.iter().map(|p| p.src).collect(),
        }
    }

    /// Nodes from which the classifier can be reached, given per-node liveness.
    pub(crate) fn useful_nodes(&self, alive: &[bool]) -> Vec<bool> {
        let mut useful = vec![false; self.nodes.len()];
        if alive[self.head_src] {
            useful[self.head_src] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if useful[i] {
                for s in self.sources(i) {
                    if alive[s] {
                        useful[s] = true;
                    }
                }
            }
        }
        useful
    }

    /// Layers with no kept channel that leave the classifier disconnected
    /// from the input. Empty when the mask can be materialized.
    pub fn validate_connectivity(&self, mask: &HardMask) -> Vec<usize> {
        let kept = mask.kept_per_layer();
        let alive = self.live_nodes(&kept);
        if alive[self.head_src] {
            return Vec::new();
        }
        // every dense path input -> head
        let all = vec![true; self.nodes.len()];
        let on_path = self.useful_nodes(&all);
        self.masked_nodes()
            .into_iter()
            .filter(|&(i, layer)| on_path[i] && kept[layer] == 0)
            .map(|(_, layer)| layer)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Plain chain of 3×3 conv-bn-relu layers; odd layers downsample.
    TinyCnn,
    /// Stem conv plus three residual blocks; the middle block downsamples
    /// with a 1×1 skip convolution.
    TinyResnet,
    /// 1×1 convolutions on `[D, 1, 1]` inputs: a batchnorm MLP.
    MlpBn,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::TinyCnn => "tiny-cnn",
            Preset::TinyResnet => "tiny-resnet",
            Preset::MlpBn => "mlp-bn",
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Preset::TinyCnn => vec![16, 16, 32, 32],
            Preset::TinyResnet => vec![8, 16],
            Preset::MlpBn => vec![32, 32],
        }
    }

    pub fn architecture(self, widths: &[usize], input: [usize; 3], classes: usize) -> Result<Architecture> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("{}: widths must be positive, got {widths:?}", self.name())));
        }
        if classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if input.contains(&0) {
            return Err(Error::Config(format!("input shape {input:?} has a zero extent")));
        }
        let mut nodes = vec![NodeSpec::Input];
        let conv = |src: usize, cin: usize, cout: usize, kernel: usize, stride: usize, layer: usize, relu: bool| {
            NodeSpec::ConvBn {
                src,
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding: kernel / 2,
                layer,
                relu,
            }
        };
        match self {
            Preset::TinyCnn => {
                let mut cin = input[0];
                for (j, &w) in widths.iter().enumerate() {
                    let stride = if j % 2 == 1 { 2 } else { 1 };
                    nodes.push(conv(j, cin, w, 3, stride, j, true));
                    cin = w;
                }
            }
            Preset::MlpBn => {
                if input[1] != 1 || input[2] != 1 {
                    return Err(Error::Config("mlp-bn expects inputs shaped [D, 1, 1]".into()));
                }
                let mut cin = input[0];
                for (j, &w) in widths.iter().enumerate() {
                    nodes.push(conv(j, cin, w, 1, 1, j, true));
                    cin = w;
                }
            }
            Preset::TinyResnet => {
                let &[w0, w1] = widths else {
                    return Err(Error::Config(format!("tiny-resnet takes two widths, got {widths:?}")));
                };
                let ident = |c: usize| (0..c).collect::<Vec<_>>();
                // stem
                nodes.push(conv(0, input[0], w0, 3, 1, 0, true)); // node 1
                // identity block
                nodes.push(conv(1, w0, w0, 3, 1, 1, true)); // node 2
                nodes.push(conv(2, w0, w0, 3, 1, 2, false)); // node 3
                nodes.push(NodeSpec::Add {
                    parts: vec![AddPart { src: 3, index: ident(w0) }, AddPart { src: 1, index: ident(w0) }],
                    channels: w0,
                    main: 0,
                    relu: true,
                }); // node 4
                // downsampling block with a 1×1 skip convolution
                nodes.push(conv(4, w0, w1, 3, 2, 3, true)); // node 5
                nodes.push(conv(5, w1, w1, 3, 1, 4, false)); // node 6
                nodes.push(conv(4, w0, w1, 1, 2, 5, false)); // node 7
                nodes.push(NodeSpec::Add {
                    parts: vec![AddPart { src: 6, index: ident(w1) }, AddPart { src: 7, index: ident(w1) }],
                    channels: w1,
                    main: 0,
                    relu: true,
                }); // node 8
                // identity block
                nodes.push(conv(8, w1, w1, 3, 1, 6, true)); // node 9
                nodes.push(conv(9, w1, w1, 3, 1, 7, false)); // node 10
                nodes.push(NodeSpec::Add {
                    parts: vec![AddPart { src: 10, index: ident(w1) }, AddPart { src: 8, index: ident(w1) }],
                    channels: w1,
                    main: 0,
                    relu: true,
                }); // node 11
            }
        }
        let head_src = nodes.len() - 1;
        let arch = Architecture { preset: self.name().to_string(), input, classes, nodes, head_src };
        arch.node_dims()?;
        Ok(arch)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Preset::TinyCnn),
            "tiny-resnet" => Ok(Preset::TinyResnet),
            "mlp-bn" => Ok(Preset::MlpBn),
            other => Err(Error::Config(format!("unknown model preset `{other}` (expected tiny-cnn|tiny-resnet|mlp-bn)"))),
        }
    }
}
