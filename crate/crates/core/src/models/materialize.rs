use std::collections::BTreeMap;

use super::arch::{AddPart, Architecture, NodeSpec};
use super::net::{beta_name, conv_name, gamma_name, MaskedNet, ParamStore, HEAD_BIAS, HEAD_WEIGHT};
use super::HardMask;
use crate::error::{Error, Result};
use crate::ndgrad::{RunningStats, Tensor};

fn pick<T: Copy>(values: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| values[i]).collect()
}

impl MaskedNet {
    /// Builds the slim network that physically drops every channel the mask
    /// removes. Branches left without kept channels, and layers that only
    /// fed them, disappear entirely.
    pub fn materialize(&self, mask: &HardMask) -> Result<MaskedNet> {
        self.check_mask_layout(mask.layout())?;
        let arch = self.architecture();
        let kept_counts = mask.kept_per_layer();
        let alive = arch.live_nodes(&kept_counts);
        if !alive[arch.head_src] {
            return Err(Error::FatalPruning { layers: arch.validate_connectivity(mask) });
        }
        let useful = arch.useful_nodes(&alive);
        let per_layer: Vec<Vec<usize>> = mask
            .layers()
            .iter()
            .map(|l| l.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
            .collect();

        // new layer numbers follow the original layer order
        let mut new_layer = BTreeMap::new();
        for (i, layer) in arch.masked_nodes() {
            if useful[i] {
                let next = new_layer.len();
                new_layer.insert(layer, next);
            }
        }

        let mut new_index: Vec<Option<usize>> = vec![None; arch.nodes.len()];
        let mut kept: Vec<Vec<usize>> = vec![Vec::new(); arch.nodes.len()];
        let mut nodes = Vec::new();
        let mut params = ParamStore::default();
        let mut running = BTreeMap::new();
        let mut psi_by_layer: BTreeMap<usize, Vec<f32>> = BTreeMap::new();

        for (i, node) in arch.nodes.iter().enumerate() {
            if !useful[i] {
                continue;
            }
            let ni = nodes.len();
            let spec = match node {
                NodeSpec::Input => {
                    kept[i] = (0..arch.input[0]).collect();
                    NodeSpec::Input
                }
                NodeSpec::ConvBn { src, kernel, stride, padding, layer, relu, in_channels, .. } => {
                    let outs = per_layer[*layer].clone();
                    let ins = &kept[*src];
                    let w = self.params.get(&conv_name(i)).expect("validated");
                    let kk = kernel * kernel;
                    let mut data = Vec::with_capacity(outs.len() * ins.len() * kk);
                    for &o in &outs {
                        for &c in ins {
                            let off = (o * in_channels + c) * kk;
                            data.extend_from_slice(&w.data()[off..off + kk]);
                        }
                    }
                    let nw = Tensor::new(vec![outs.len(), ins.len(), *kernel, *kernel], data)?;
                    params.push(conv_name(ni), nw, true);
                    let gamma = self.params.get(&gamma_name(i)).expect("validated");
                    let beta = self.params.get(&beta_name(i)).expect("validated");
                    params.push(gamma_name(ni), Tensor::from_vec(pick(gamma.data(), &outs)), true);
                    params.push(beta_name(ni), Tensor::from_vec(pick(beta.data(), &outs)), true);
                    let stats = &self.running[&i];
                    running.insert(ni, RunningStats { mean: pick(&stats.mean, &outs), var: pick(&stats.var, &outs) });
                    let range = self.masks.layer_range(*layer);
                    psi_by_layer.insert(new_layer[layer], pick(&self.masks.psi[range], &outs));
                    let spec = NodeSpec::ConvBn {
                        src: new_index[*src].expect("sources precede"),
                        in_channels: ins.len(),
                        out_channels: outs.len(),
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        layer: new_layer[layer],
                        relu: *relu,
                    };
                    kept[i] = outs;
                    spec
                }
                NodeSpec::Add { parts, main, relu, .. } => {
                    let live: Vec<(usize, &AddPart)> =
                        parts.iter().enumerate().filter(|(_, p)| useful[p.src]).collect();
                    let mut union: Vec<usize> =
                        live.iter().flat_map(|(_, p)| kept[p.src].iter().map(|&c| p.index[c])).collect();
                    union.sort_unstable();
                    union.dedup();
                    let new_parts = live
                        .iter()
                        .map(|(_, p)| AddPart {
                            src: new_index[p.src].expect("sources precede"),
                            index: kept[p.src]
                                .iter()
                                .map(|&c| union.binary_search(&p.index[c]).expect("member of union"))
                                .collect(),
                        })
                        .collect();
                    let new_main = live.iter().position(|(k, _)| k == main).unwrap_or(0);
                    let spec = NodeSpec::Add { parts: new_parts, channels: union.len(), main: new_main, relu: *relu };
                    kept[i] = union;
                    spec
                }
            };
            new_index[i] = Some(ni);
            nodes.push(spec);
        }

        let feat = &kept[arch.head_src];
        let hw = self.params.get(HEAD_WEIGHT).expect("validated");
        let dense_feat = hw.shape()[1];
        let mut data = Vec::with_capacity(arch.classes * feat.len());
        for k in 0..arch.classes {
            data.extend(feat.iter().map(|&c| hw.data()[k * dense_feat + c]));
        }
        params.push(HEAD_WEIGHT, Tensor::new(vec![arch.classes, feat.len()], data)?, true);
        params.push(HEAD_BIAS, self.params.get(HEAD_BIAS).expect("validated").clone(), true);

        let slim = Architecture {
            preset: arch.preset.clone(),
            input: arch.input,
            classes: arch.classes,
            nodes,
            head_src: new_index[arch.head_src].expect("head source is useful"),
        };
        let psi = psi_by_layer.into_values().flatten().collect();
        MaskedNet::from_parts(slim, params, running, psi)
    }
}
