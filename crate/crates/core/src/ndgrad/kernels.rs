//! Forward and backward kernels over flat row-major buffers.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

/// Geometry of a 2-d cross-correlation with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if kernel > padded || stride == 0 {
            None
        } else {
            Some((padded - kernel) / stride + 1)
        }
    }

    /// Range of output columns whose receptive field covers a valid input
    /// column for kernel offset `k`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // o*s + k - p >= 0  and  o*s + k - p <= size - 1
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = size as isize - 1 + p - k;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub fn conv2d_forward(input: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (h, w, oh, ow) = (g.height, g.width, g.out_height, g.out_width);
    let k = g.kernel;
    let mut out = vec![0.0f32; g.batch * g.out_channels * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kw| g.valid_range(kw, w, ow)).collect();
    let row_ranges: Vec<(usize, usize)> = (0..k).map(|kh| g.valid_range(kh, h, oh)).collect();
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ci in 0..g.in_channels {
                let plane = &input[(n * g.in_channels + ci) * h * w..][..h * w];
                let wbase = ((co * g.in_channels + ci) * k) * k;
                for kh in 0..k {
                    let (oy0, oy1) = row_ranges[kh];
                    for kw in 0..k {
                        let wv = weight[wbase + kh * k + kw] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = col_ranges[kw];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.padding;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let arow = &mut acc[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kw - g.padding;
                                arow[ox] += wv * row[ix] as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight)`.
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_height, g.out_width);
    let k = g.kernel;
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kw| g.valid_range(kw, w, ow)).collect();
    let row_ranges: Vec<(usize, usize)> = (0..k).map(|kh| g.valid_range(kh, h, oh)).collect();

    let d_input = need_input.then(|| {
        let mut dx = vec![0.0f32; input.len()];
        let mut acc = vec![0.0f64; g.in_channels * h * w];
        for n in 0..g.batch {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for co in 0..g.out_channels {
                let gplane = &grad_out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
                for ci in 0..g.in_channels {
                    let aplane = &mut acc[ci * h * w..(ci + 1) * h * w];
                    let wbase = ((co * g.in_channels + ci) * k) * k;
                    for kh in 0..k {
                        let (oy0, oy1) = row_ranges[kh];
                        for kw in 0..k {
                            let wv = weight[wbase + kh * k + kw] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox0, ox1) = col_ranges[kw];
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + kh - g.padding;
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kw - g.padding;
                                    aplane[iy * w + ix] += wv * gplane[oy * ow + ox] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut dx[n * g.in_channels * h * w..][..g.in_channels * h * w];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
        dx
    });

    let d_weight = need_weight.then(|| {
        let mut dw = vec![0.0f32; weight.len()];
        for co in 0..g.out_channels {
            for ci in 0..g.in_channels {
                for kh in 0..k {
                    let (oy0, oy1) = row_ranges[kh];
                    for kw in 0..k {
                        let (ox0, ox1) = col_ranges[kw];
                        let mut acc = 0.0f64;
                        for n in 0..g.batch {
                            let plane = &input[(n * g.in_channels + ci) * h * w..][..h * w];
                            let gplane = &grad_out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + kh - g.padding;
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kw - g.padding;
                                    acc += gplane[oy * ow + ox] as f64 * plane[iy * w + ix] as f64;
                                }
                            }
                        }
                        dw[((co * g.in_channels + ci) * k + kh) * k + kw] = acc as f32;
                    }
                }
            }
        }
        dw
    });

    (d_input, d_weight)
}

/// Per-channel mean and biased variance over the batch and spatial axes.
pub fn channel_moments(input: &[f32], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            s += input[(n * channels + c) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for n in 0..batch {
            ss += input[(n * channels + c) * plane..][..plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / count;
    }
    (mean, var)
}

/// Normalizes with the given per-channel statistics; returns `(output, x_hat)`.
pub fn batchnorm_forward(
    input: &[f32],
    dims: [usize; 4],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0f32; input.len()];
    let mut xhat = vec![0.0f32; input.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, s) = (mean[ch], inv_std[ch]);
            let (ga, be) = (gamma[ch] as f64, beta[ch] as f64);
            for i in off..off + plane {
                let xh = (input[i] as f64 - m) * s;
                xhat[i] = xh as f32;
                out[i] = (ga * xh + be) as f32;
            }
        }
    }
    (out, xhat)
}

/// Backward of batch normalization. With `batch_stats` the statistics are
/// treated as functions of the input; otherwise they are constants.
pub fn batchnorm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    dims: [usize; 4],
    inv_std: &[f64],
    gamma: &[f32],
    batch_stats: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dx = vec![0.0f32; grad_out.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += grad_out[i] as f64;
                sum_dy_xhat += grad_out[i] as f64 * xhat[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let scale = gamma[ch] as f64 * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let dy = grad_out[i] as f64;
                let v = if batch_stats {
                    scale * (dy - sum_dy / count - xhat[i] as f64 * sum_dy_xhat / count)
                } else {
                    scale * dy
                };
                dx[i] = v as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn linear_forward(input: &[f32], weight: &[f32], bias: &[f32], n: usize, d: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        let row = &input[i * d..(i + 1) * d];
        for j in 0..k {
            let wrow = &weight[j * d..(j + 1) * d];
            let dot: f64 = row.iter().zip(wrow).map(|(&a, &b)| a as f64 * b as f64).sum();
            out[i * k + j] = (dot + bias[j] as f64) as f32;
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    n: usize,
    d: usize,
    k: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * d];
    for i in 0..n {
        for c in 0..d {
            let s: f64 = (0..k).map(|j| grad_out[i * k + j] as f64 * weight[j * d + c] as f64).sum();
            dx[i * d + c] = s as f32;
        }
    }
    let mut dw = vec![0.0f32; k * d];
    for j in 0..k {
        for c in 0..d {
            let s: f64 = (0..n).map(|i| grad_out[i * k + j] as f64 * input[i * d + c] as f64).sum();
            dw[j * d + c] = s as f32;
        }
    }
    let db = (0..k)
        .map(|j| (0..n).map(|i| grad_out[i * k + j] as f64).sum::<f64>() as f32)
        .collect();
    (dx, dw, db)
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
/// Returns the loss and the row-wise softmax probabilities.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], n: usize, k: usize) -> (f64, Vec<f32>) {
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]] as f64;
        for j in 0..k {
            probs[i * k + j] = ((row[j] as f64 - lse).exp()) as f32;
        }
    }
    (total / n as f64, probs)
}
