//! Plain f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use chipnet_core::budgets::{BudgetKind, LayerSpec, NetworkShape};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logistic(x: f64, beta: f64, midpoint: f64) -> f64 {
    sigmoid(beta * (x - midpoint))
}

pub fn heaviside(z: f64, gamma: f64) -> f64 {
    1.0 - (-gamma * z).exp() + z * (-gamma).exp()
}

/// Output height and width of a cross-correlation.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, h, wd] = xs;
    let [cout, _, k, _] = ws;
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, s) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * cin + c) * h + r as usize) * wd + s as usize] * w[((o * cin + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Batch normalization; `stats` of `None` uses the biased batch moments.
pub fn batchnorm(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| x[(b * c + ch) * plane..][..plane].iter().copied()).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64)
            }
        };
        for b in 0..n {
            for p in 0..plane {
                let i = (b * c + ch) * plane + p;
                out[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn channel_scale(x: &[f64], n: usize, c: usize, s: &[f64]) -> Vec<f64> {
    let plane = x.len() / (n * c);
    x.iter().enumerate().map(|(i, v)| v * s[(i / plane) % c]).collect()
}

pub fn global_avg_pool(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let plane = x.len() / (n * c);
    x.chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect()
}

pub fn linear(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for o in 0..k {
            out[r * k + o] = b[o] + (0..d).map(|i| x[r * d + i] * w[o * d + i]).sum::<f64>();
        }
    }
    out
}

pub fn softmax_ce(logits: &[f64], labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    let mut total = 0.0;
    for (row, &l) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

/// Budget fraction written out layer by layer.
pub fn budget(kind: BudgetKind, shape: &NetworkShape, masks: &[f64]) -> f64 {
    let mut kept = Vec::new();
    let mut offset = 0;
    for l in &shape.layers {
        if l.prunable {
            kept.push(masks[offset..offset + l.channels].iter().sum::<f64>());
            offset += l.channels;
        } else {
            kept.push(l.channels as f64);
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (j, l) in shape.layers.iter().enumerate() {
        let (s, p) = (kept[j], l.channels as f64);
        let (s_in, p_in) = match l.pred {
            Some(q) => (kept[q], shape.layers[q].channels as f64),
            None => (shape.input_channels as f64, shape.input_channels as f64),
        };
        let (k, a) = (l.kernel_area as f64, l.feature_area as f64);
        let (top, bottom) = match kind {
            BudgetKind::Channel => (s, p),
            BudgetKind::Volume => (a * s, a * p),
            BudgetKind::Parameter => (k * s * s_in + 2.0 * s, k * p * p_in + 2.0 * p),
            BudgetKind::Flops => (a * s * (k * s_in + 1.0), a * p * (k * p_in + 1.0)),
        };
        num += top;
        den += bottom;
    }
    num / den
}

/// Random shape with up to `max_layers` layers of up to `max_channels`
/// channels; roughly one layer in five is not prunable.
pub fn random_shape<R: Rng>(rng: &mut R, max_layers: usize, max_channels: usize) -> NetworkShape {
    let count = rng.random_range(1..=max_layers);
    let mut layers = Vec::with_capacity(count);
    for j in 0..count {
        layers.push(LayerSpec {
            index: j,
            channels: rng.random_range(1..=max_channels),
            feature_area: [1, 4, 9, 16, 64][rng.random_range(0..5)],
            kernel_area: [1, 9, 25][rng.random_range(0..3)],
            pred: if j == 0 || rng.random_bool(0.2) { None } else { Some(rng.random_range(0..j)) },
            prunable: j == 0 || rng.random_bool(0.8),
        });
    }
    NetworkShape::new(rng.random_range(1..=4), layers).unwrap()
}

/// Central differences of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, with the denominator floored at `floor`.
pub fn relative_error(a: &[f32], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}
