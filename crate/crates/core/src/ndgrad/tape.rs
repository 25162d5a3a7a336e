use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::budgets::{BudgetKind, NetworkShape};
use crate::error::{Error, Result};
use crate::projections;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

impl std::str::FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(BnMode::Train),
            "eval" => Ok(BnMode::Eval),
            other => Err(Error::Config(format!("unknown batchnorm mode `{other}` (expected train|eval)"))),
        }
    }
}

/// Running per-channel statistics of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnSettings {
    pub mode: BnMode,
    pub eps: f64,
    /// Weight of the new batch statistic in the running average. `None`
    /// replaces the running statistics with those of the batch.
    pub momentum: Option<f64>,
}

impl Default for BnSettings {
    fn default() -> Self {
        BnSettings { mode: BnMode::Train, eps: 1e-5, momentum: Some(0.1) }
    }
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { input: Var },
    ChannelScale { input: Var, scale: Var },
    ScatterAdd { parts: Vec<(Var, Vec<usize>)> },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Sum { input: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Slice { input: Var, start: usize },
    Logistic { input: Var, beta: f64, midpoint: f64 },
    Heaviside { input: Var, gamma: f64 },
    SquaredDistance { a: Var, b: Var },
    Budget { input: Var, kind: BudgetKind, shape: Arc<NetworkShape> },
    SquaredError { input: Var, target: f64 },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed primitives.
///
/// Every primitive checks its output for NaN/Inf. A tape supports one
/// backward pass; call [`Tape::reset`] before recording the next forward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a loss with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.ensure_recording()?;
        tensor.check_finite("leaf")?;
        let needs_grad = tensor.requires_grad();
        Ok(self.push_raw(tensor, Op::Leaf, needs_grad))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn ensure_recording(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn get(&self, var: Var) -> Result<&Tensor> {
        self.ensure_recording()?;
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::shape("tape", format!("variable {} is not on this tape", var.0)))
    }

    /// Cross-correlation without bias. `input` is `[N, C_in, H, W]`,
    /// `weight` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.get(input)?.dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.get(weight)?.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels but weight expects {wcin}")));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let oh = ConvGeom::out_extent(h, kh, stride, padding);
        let ow = ConvGeom::out_extent(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} larger than padded input {h}x{w} with padding {padding}"),
            ));
        };
        let geom = ConvGeom {
            batch: n,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel: kh,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, geom }, &[input, weight])
    }

    /// Batch normalization over `[N, C, H, W]`. In train mode the batch
    /// statistics normalize the input and update `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        settings: BnSettings,
    ) -> Result<Var> {
        let dims = self.get(input)?.dims4("batchnorm2d")?;
        let [n, c, h, w] = dims;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.get(v)?.numel() != c {
                return Err(Error::shape("batchnorm2d", format!("{name} length does not match {c} channels")));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm2d", format!("running statistics do not match {c} channels")));
        }
        let (mean, var, batch_stats) = match settings.mode {
            BnMode::Train => {
                if n * h * w < 2 {
                    return Err(Error::shape("batchnorm2d", "train mode needs at least two values per channel"));
                }
                let (mean, var) = kernels::channel_moments(self.value(input).data(), n, c, h * w);
                let count = (n * h * w) as f64;
                let unbias = count / (count - 1.0);
                for ch in 0..c {
                    let (m, v) = (mean[ch], var[ch] * unbias);
                    match settings.momentum {
                        Some(mom) => {
                            stats.mean[ch] = ((1.0 - mom) * stats.mean[ch] as f64 + mom * m) as f32;
                            stats.var[ch] = ((1.0 - mom) * stats.var[ch] as f64 + mom * v) as f32;
                        }
                        None => {
                            stats.mean[ch] = m as f32;
                            stats.var[ch] = v as f32;
                        }
                    }
                }
                (mean, var, true)
            }
            BnMode::Eval => (
                stats.mean.iter().map(|&v| v as f64).collect(),
                stats.var.iter().map(|&v| v as f64).collect(),
                false,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + settings.eps).sqrt()).collect();
        let (out, xhat) = kernels::batchnorm_forward(
            self.value(input).data(),
            dims,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(dims.to_vec(), out)?;
        self.push(
            "batchnorm2d",
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats },
            &[input, gamma, beta],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.get(input)?;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Multiplies channel `c` of a `[N, C, ...]` tensor by `scale[c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.get(input)?;
        let s = self.get(scale)?;
        let shape = x.shape().to_vec();
        if shape.len() < 2 || s.numel() != shape[1] {
            return Err(Error::shape(
                "channel_scale",
                format!("scale of length {} for input {:?}", s.numel(), shape),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let mut data = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let f = s.data()[ch];
                data[(b * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v *= f);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push("channel_scale", value, Op::ChannelScale { input, scale }, &[input, scale])
    }

    /// Sums `[N, C_i, H, W]` parts into a `[N, out_channels, H, W]` output;
    /// channel `k` of part `i` lands on output channel `parts[i].1[k]`.
    pub fn scatter_add(&mut self, parts: Vec<(Var, Vec<usize>)>, out_channels: usize) -> Result<Var> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::shape("scatter_add", "no inputs"));
        };
        let [n, _, h, w] = self.get(first)?.dims4("scatter_add")?;
        let plane = h * w;
        let mut out = vec![0.0f32; n * out_channels * plane];
        for (var, index) in &parts {
            let x = self.get(*var)?;
            let [pn, pc, ph, pw] = x.dims4("scatter_add")?;
            if pn != n || ph != h || pw != w || pc != index.len() || index.iter().any(|&i| i >= out_channels) {
                return Err(Error::shape(
                    "scatter_add",
                    format!("part {:?} incompatible with output channels {out_channels}", x.shape()),
                ));
            }
            for b in 0..n {
                for (k, &dst) in index.iter().enumerate() {
                    let src = &x.data()[(b * pc + k) * plane..][..plane];
                    let d = &mut out[(b * out_channels + dst) * plane..][..plane];
                    d.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
            }
        }
        let value = Tensor::new(vec![n, out_channels, h, w], out)?;
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push("scatter_add", value, Op::ScatterAdd { parts }, &inputs)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [_, c, _, _] = self.get(a)?.dims4("add")?;
        if self.get(a)?.shape() != self.get(b)?.shape() {
            return Err(Error::shape("add", "operands differ in shape"));
        }
        let index: Vec<usize> = (0..c).collect();
        self.scatter_add(vec![(a, index.clone()), (b, index)], c)
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.get(input)?.dims4("global_avg_pool")?;
        let plane = h * w;
        let x = self.value(input).data();
        let data = (0..n * c)
            .map(|i| (x[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input }, &[input])
    }

    /// `input · weightᵀ + bias` for `input [N, D]`, `weight [K, D]`, `bias [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.get(input)?;
        let wt = self.get(weight)?;
        let b = self.get(bias)?;
        let (&[n, d], &[k, wd]) = (x.shape(), wt.shape()) else {
            return Err(Error::shape(
                "linear",
                format!("expected [N, D] input and [K, D] weight, got {:?} and {:?}", x.shape(), wt.shape()),
            ));
        };
        if wd != d || b.numel() != k {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?} do not agree", x.shape(), wt.shape(), b.shape()),
            ));
        }
        let out = kernels::linear_forward(x.data(), wt.data(), b.data(), n, d, k);
        let value = Tensor::new(vec![n, k], out)?;
        self.push("linear", value, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.get(logits)?;
        let &[n, k] = x.shape() else {
            return Err(Error::shape("softmax_cross_entropy", format!("expected [N, K] logits, got {:?}", x.shape())));
        };
        if n == 0 || labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(x.data(), labels, n, k);
        let value = Tensor::scalar(loss as f32);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.get(input)?.data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum { input }, &[input])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.get(input)?;
        let data = x.data().iter().map(|&v| (v as f64 * factor) as f32).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Contiguous sub-range of a 1-d tensor.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.get(input)?;
        if x.shape().len() != 1 || start + len > x.numel() {
            return Err(Error::shape("slice", format!("[{start}, {}) of {:?}", start + len, x.shape())));
        }
        let value = Tensor::from_vec(x.data()[start..start + len].to_vec());
        self.push("slice", value, Op::Slice { input, start }, &[input])
    }

    /// Elementwise logistic curve with growth rate `beta` and midpoint `midpoint`.
    pub fn logistic(&mut self, input: Var, beta: f64, midpoint: f64) -> Result<Var> {
        let x = self.get(input)?;
        let data = x.data().iter().map(|&v| projections::logistic(v as f64, beta, midpoint) as f32).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("logistic", value, Op::Logistic { input, beta, midpoint }, &[input])
    }

    /// Elementwise continuous Heaviside projection with curvature `gamma`.
    pub fn heaviside(&mut self, input: Var, gamma: f64) -> Result<Var> {
        let x = self.get(input)?;
        let data = x.data().iter().map(|&v| projections::heaviside(v as f64, gamma) as f32).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("heaviside", value, Op::Heaviside { input, gamma }, &[input])
    }

    /// Squared L2 distance between two equally shaped tensors.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape("squared_distance", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| {
                let d = p as f64 - q as f64;
                d * d
            })
            .sum();
        self.push("squared_distance", Tensor::scalar(s as f32), Op::SquaredDistance { a, b }, &[a, b])
    }

    /// Budget fraction of a flat mask vector laid out per `shape`.
    pub fn budget(&mut self, input: Var, kind: BudgetKind, shape: Arc<NetworkShape>) -> Result<Var> {
        let masks: Vec<f64> = self.get(input)?.data().iter().map(|&v| v as f64).collect();
        let v = kind.evaluate(&shape, &masks)?;
        self.push("budget", Tensor::scalar(v as f32), Op::Budget { input, kind, shape }, &[input])
    }

    /// `(x - target)²` for a scalar `x`.
    pub fn squared_error(&mut self, input: Var, target: f64) -> Result<Var> {
        let x = self.get(input)?;
        if !x.is_scalar() {
            return Err(Error::shape("squared_error", format!("expected a scalar, got {:?}", x.shape())));
        }
        let d = x.item() as f64 - target;
        self.push("squared_error", Tensor::scalar((d * d) as f32), Op::SquaredError { input, target }, &[input])
    }

    /// `Σ wᵢ·xᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, w) in terms {
            let x = self.get(v)?;
            if !x.is_scalar() {
                return Err(Error::shape("weighted_sum", format!("expected scalar terms, got {:?}", x.shape())));
            }
            s += w * x.item() as f64;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push("weighted_sum", Tensor::scalar(s as f32), Op::WeightedSum { terms: terms.to_vec() }, &inputs)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad`; the tape is consumed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.ensure_recording()?;
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::shape("backward", format!("variable {} is not on this tape", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (var, contrib) in self.local_backward(idx, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn local_backward(&self, idx: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.needs(*input),
                    self.needs(*weight),
                );
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dw.map(|d| (*weight, d)));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let dims = node.value.dims4("batchnorm2d").expect("recorded 4-d");
                let (dx, dg, db) =
                    kernels::batchnorm_backward(g, xhat, dims, inv_std, self.value(*gamma).data(), *batch_stats);
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                out.push((*input, d));
            }
            Op::ChannelScale { input, scale } => {
                let x = self.value(*input);
                let s = self.value(*scale).data();
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let plane: usize = x.shape()[2..].iter().product();
                if self.needs(*input) {
                    let mut dx = g.to_vec();
                    for b in 0..n {
                        for ch in 0..c {
                            dx[(b * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v *= s[ch]);
                        }
                    }
                    out.push((*input, dx));
                }
                if self.needs(*scale) {
                    let mut ds = vec![0.0f64; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            ds[ch] += x.data()[off..off + plane]
                                .iter()
                                .zip(&g[off..off + plane])
                                .map(|(&a, &b)| a as f64 * b as f64)
                                .sum::<f64>();
                        }
                    }
                    out.push((*scale, ds.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::ScatterAdd { parts } => {
                let [n, oc, h, w] = node.value.dims4("scatter_add").expect("recorded 4-d");
                let plane = h * w;
                for (var, index) in parts {
                    let pc = index.len();
                    let mut d = vec![0.0f32; n * pc * plane];
                    for b in 0..n {
                        for (k, &dst) in index.iter().enumerate() {
                            d[(b * pc + k) * plane..][..plane]
                                .copy_from_slice(&g[(b * oc + dst) * plane..][..plane]);
                        }
                    }
                    out.push((*var, d));
                }
            }
            Op::GlobalAvgPool { input } => {
                let [n, c, h, w] = self.value(*input).dims4("global_avg_pool").expect("recorded 4-d");
                let plane = h * w;
                let mut d = vec![0.0f32; n * c * plane];
                for i in 0..n * c {
                    let v = (g[i] as f64 / plane as f64) as f32;
                    d[i * plane..(i + 1) * plane].iter_mut().for_each(|x| *x = v);
                }
                out.push((*input, d));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = wt.shape()[0];
                let (dx, dw, db) = kernels::linear_backward(x.data(), wt.data(), g, n, d, k);
                out.push((*input, dx));
                out.push((*weight, dw));
                out.push((*bias, db));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] as f64 / n as f64;
                let mut d: Vec<f32> = probs.iter().map(|&p| (p as f64 * scale) as f32).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = ((probs[i * k + l] as f64 - 1.0) * scale) as f32;
                }
                out.push((*logits, d));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()));
                out.push((*b, g.iter().zip(x).map(|(gv, xv)| gv * xv).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| (v as f64 * factor) as f32).collect()));
            }
            Op::Slice { input, start } => {
                let mut d = vec![0.0f32; self.value(*input).numel()];
                d[*start..*start + g.len()].copy_from_slice(g);
                out.push((*input, d));
            }
            Op::Logistic { input, beta, midpoint } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| (gv as f64 * projections::logistic_grad(v as f64, *beta, *midpoint)) as f32)
                    .collect();
                out.push((*input, d));
            }
            Op::Heaviside { input, gamma } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| (gv as f64 * projections::heaviside_grad(v as f64, *gamma)) as f32)
                    .collect();
                out.push((*input, d));
            }
            Op::SquaredDistance { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f32> =
                    x.iter().zip(y).map(|(&p, &q)| (2.0 * g[0] as f64 * (p as f64 - q as f64)) as f32).collect();
                let db = da.iter().map(|v| -v).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Budget { input, kind, shape } => {
                let masks: Vec<f64> = self.value(*input).data().iter().map(|&v| v as f64).collect();
                let grad = kind.gradient(shape, &masks).expect("layout validated in forward");
                out.push((*input, grad.into_iter().map(|v| (v * g[0] as f64) as f32).collect()));
            }
            Op::SquaredError { input, target } => {
                let x = self.value(*input).item() as f64;
                out.push((*input, vec![(2.0 * (x - target) * g[0] as f64) as f32]));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    out.push((v, vec![(w * g[0] as f64) as f32]));
                }
            }
        }
        out
    }
}
