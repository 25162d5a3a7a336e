//! Tape gradients against central differences of the f64 references.

use std::sync::Arc;

use chipnet_core::budgets::BudgetKind;
use chipnet_core::ndgrad::{BnMode, BnSettings, RunningStats, Tape, Tensor, Var};
use chipnet_core::pruner::{chipnet_loss, Reduction};
use chipnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this in norm are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;
type Reference<'a> = dyn Fn(&[Vec<f64>]) -> f64 + 'a;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn input(shape: &[usize], data: Vec<f32>) -> Input {
    Input { shape: shape.to_vec(), data }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Relative error of every input gradient of `build` against `reference`.
pub fn check(name: &str, inputs: &[Input], build: &Build<'_>, reference: &Reference<'_>) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| tape.leaf(Tensor::new(i.shape.clone(), i.data.clone()).unwrap().with_requires_grad(true)).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
    let grads = tape.backward(loss).unwrap();
    let wide: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    (0..inputs.len())
        .map(|k| {
            let fd = finite_difference(
                |x| {
                    let mut probe = wide.clone();
                    probe[k] = x.to_vec();
                    reference(&probe)
                },
                &wide[k],
                FD_STEP,
            );
            let analytic = grads.get(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; fd.len()]);
            (format!("{name}[{k}]"), relative_error(&analytic, &fd, NORM_FLOOR))
        })
        .collect()
}

/// `Σ rᵢ·outᵢ` on the tape, turning any output into a scalar.
fn project(tape: &mut Tape, out: Var, r: &[f32]) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let weights = tape.constant(Tensor::new(shape, r.to_vec())?)?;
    let prod = tape.mul(out, weights)?;
    tape.sum(prod)
}

fn dot(r: &[f32], out: &[f64]) -> f64 {
    r.iter().zip(out).map(|(&a, b)| a as f64 * b).sum()
}

/// Every gradient check for one seed.
pub fn suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // mask projections
    let beta = rng.random_range(0.5..5.0);
    let mid = rng.random_range(-1.0..1.0);
    let x = uniform(&mut rng, 6, -3.0, 3.0);
    let r = uniform(&mut rng, 6, -1.0, 1.0);
    out.extend(check(
        "logistic",
        &[input(&[6], x)],
        &|t, v| {
            let y = t.logistic(v[0], beta, mid)?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().map(|&v| logistic(v, beta, mid)).collect::<Vec<_>>()),
    ));

    let gamma = [1.0, 2.0, 8.0, 32.0, 256.0][rng.random_range(0..5)];
    let z = uniform(&mut rng, 6, 0.0, 1.0);
    out.extend(check(
        "heaviside",
        &[input(&[6], z)],
        &|t, v| {
            let y = t.heaviside(v[0], gamma)?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().map(|&v| heaviside(v, gamma)).collect::<Vec<_>>()),
    ));

    let gamma = rng.random_range(1.0..16.0);
    let psi = uniform(&mut rng, 8, -2.0, 2.0);
    out.extend(check(
        "crispness",
        &[input(&[8], psi.clone())],
        &|t, v| {
            let zt = t.logistic(v[0], beta, 0.0)?;
            let z = t.heaviside(zt, gamma)?;
            t.squared_distance(zt, z)
        },
        &|x| {
            x[0].iter()
                .map(|&p| {
                    let zt = logistic(p, beta, 0.0);
                    (zt - heaviside(zt, gamma)).powi(2)
                })
                .sum()
        },
    ));

    // budgets through the whole ψ → z̃ → z → z̄ chain
    let shape = Arc::new(random_shape(&mut rng, 4, 6));
    let p = shape.mask_len();
    let psi = uniform(&mut rng, p, -1.5, 1.5);
    let gamma = rng.random_range(1.0..8.0);
    let round = rng.random_range(2.0..20.0);
    for kind in BudgetKind::ALL {
        let sh = shape.clone();
        out.extend(check(
            &format!("{kind}_budget"),
            &[input(&[p], psi.clone())],
            &|t, v| {
                let zt = t.logistic(v[0], beta, 0.0)?;
                let z = t.heaviside(zt, gamma)?;
                let zb = t.logistic(z, round, 0.5)?;
                t.budget(zb, kind, sh.clone())
            },
            &|x| {
                let zb: Vec<f64> =
                    x[0].iter().map(|&p| logistic(heaviside(logistic(p, beta, 0.0), gamma), round, 0.5)).collect();
                budget(kind, &sh, &zb)
            },
        ));
    }

    // the joint loss
    let kind = BudgetKind::ALL[rng.random_range(0..4)];
    let target = rng.random_range(0.1..0.9);
    let (a1, a2) = (rng.random_range(0.0..20.0), rng.random_range(0.0..40.0));
    let logits = uniform(&mut rng, 3 * 4, -2.0, 2.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    {
        let sh = shape.clone();
        out.extend(check(
            "joint_loss",
            &[input(&[p], psi.clone()), input(&[3, 4], logits)],
            &|t, v| {
                let zt = t.logistic(v[0], beta, 0.0)?;
                let z = t.heaviside(zt, gamma)?;
                let zb = t.logistic(z, round, 0.5)?;
                let vb = t.budget(zb, kind, sh.clone())?;
                Ok(chipnet_loss(t, vb, target, zt, z, v[1], &labels, a1, a2, Reduction::Mean)?.total)
            },
            &|x| {
                let zt: Vec<f64> = x[0].iter().map(|&p| logistic(p, beta, 0.0)).collect();
                let z: Vec<f64> = zt.iter().map(|&v| heaviside(v, gamma)).collect();
                let zb: Vec<f64> = z.iter().map(|&v| logistic(v, round, 0.5)).collect();
                let crisp = zt.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p as f64;
                softmax_ce(&x[1], &labels) + a1 * crisp + a2 * (budget(kind, &sh, &zb) - target).powi(2)
            },
        ));
    }

    // network primitives
    let k = [1usize, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (xs, ws) = ([2, 2, 5, 5], [3, 2, k, k]);
    let oh = conv_out(5, k, stride, pad);
    let r = uniform(&mut rng, 2 * 3 * oh * oh, -1.0, 1.0);
    out.extend(check(
        "conv2d",
        &[input(&xs, uniform(&mut rng, 100, -1.0, 1.0)), input(&ws, uniform(&mut rng, 6 * k * k, -1.0, 1.0))],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            project(t, y, &r)
        },
        &|x| dot(&r, &conv2d(&x[0], xs, &x[1], ws, stride, pad)),
    ));

    let bs = [3, 2, 3, 3];
    let r = uniform(&mut rng, 54, -1.0, 1.0);
    let bn_inputs = [
        input(&bs, uniform(&mut rng, 54, -2.0, 2.0)),
        input(&[2], uniform(&mut rng, 2, 0.5, 1.5)),
        input(&[2], uniform(&mut rng, 2, -0.5, 0.5)),
    ];
    out.extend(check(
        "batchnorm_train",
        &bn_inputs,
        &|t, v| {
            let mut stats = RunningStats::new(2);
            let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnSettings::default())?;
            project(t, y, &r)
        },
        &|x| dot(&r, &batchnorm(&x[0], bs, &x[1], &x[2], None, 1e-5)),
    ));
    let (rm, rv) = (uniform(&mut rng, 2, -0.5, 0.5), uniform(&mut rng, 2, 0.5, 2.0));
    let (rm64, rv64): (Vec<f64>, Vec<f64>) = (rm.iter().map(|&v| v as f64).collect(), rv.iter().map(|&v| v as f64).collect());
    out.extend(check(
        "batchnorm_eval",
        &bn_inputs,
        &|t, v| {
            let mut stats = RunningStats { mean: rm.clone(), var: rv.clone() };
            let eval = BnSettings { mode: BnMode::Eval, ..BnSettings::default() };
            let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, eval)?;
            project(t, y, &r)
        },
        &|x| dot(&r, &batchnorm(&x[0], bs, &x[1], &x[2], Some((&rm64, &rv64)), 1e-5)),
    ));

    // keep inputs away from the kink
    let x: Vec<f32> = uniform(&mut rng, 10, -1.0, 1.0).into_iter().map(|v| if v.abs() < 0.01 { v + 0.02 } else { v }).collect();
    let r = uniform(&mut rng, 10, -1.0, 1.0);
    out.extend(check(
        "relu",
        &[input(&[10], x)],
        &|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().map(|&v| v.max(0.0)).collect::<Vec<_>>()),
    ));

    let cs = [2, 3, 2, 2];
    let r = uniform(&mut rng, 24, -1.0, 1.0);
    out.extend(check(
        "channel_scale",
        &[input(&cs, uniform(&mut rng, 24, -1.0, 1.0)), input(&[3], uniform(&mut rng, 3, 0.0, 1.0))],
        &|t, v| {
            let y = t.channel_scale(v[0], v[1])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &channel_scale(&x[0], 2, 3, &x[1])),
    ));

    let (ia, ib) = (vec![0usize, 2], vec![2usize, 1, 0]);
    let r = uniform(&mut rng, 24, -1.0, 1.0);
    out.extend(check(
        "scatter_add",
        &[input(&[2, 2, 2, 2], uniform(&mut rng, 16, -1.0, 1.0)), input(&[2, 3, 2, 2], uniform(&mut rng, 24, -1.0, 1.0))],
        &|t, v| {
            let y = t.scatter_add(vec![(v[0], ia.clone()), (v[1], ib.clone())], 3)?;
            project(t, y, &r)
        },
        &|x| {
            let mut y = vec![0.0; 24];
            for (part, index, c) in [(&x[0], &ia, 2), (&x[1], &ib, 3)] {
                for b in 0..2 {
                    for (kk, &dst) in index.iter().enumerate() {
                        for q in 0..4 {
                            y[(b * 3 + dst) * 4 + q] += part[(b * c + kk) * 4 + q];
                        }
                    }
                }
            }
            dot(&r, &y)
        },
    ));

    let r = uniform(&mut rng, 16, -1.0, 1.0);
    out.extend(check(
        "add",
        &[input(&[2, 2, 2, 2], uniform(&mut rng, 16, -1.0, 1.0)), input(&[2, 2, 2, 2], uniform(&mut rng, 16, -1.0, 1.0))],
        &|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect::<Vec<_>>()),
    ));

    let r = uniform(&mut rng, 6, -1.0, 1.0);
    out.extend(check(
        "global_avg_pool",
        &[input(&[2, 3, 2, 3], uniform(&mut rng, 36, -1.0, 1.0))],
        &|t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &global_avg_pool(&x[0], 2, 3)),
    ));

    let r = uniform(&mut rng, 6, -1.0, 1.0);
    out.extend(check(
        "linear",
        &[
            input(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0)),
            input(&[2, 4], uniform(&mut rng, 8, -1.0, 1.0)),
            input(&[2], uniform(&mut rng, 2, -1.0, 1.0)),
        ],
        &|t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &linear(&x[0], 3, 4, &x[1], &x[2])),
    ));

    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    out.extend(check(
        "softmax_cross_entropy",
        &[input(&[4, 3], uniform(&mut rng, 12, -3.0, 3.0))],
        &|t, v| t.softmax_cross_entropy(v[0], &labels),
        &|x| softmax_ce(&x[0], &labels),
    ));

    out.extend(check(
        "sum",
        &[input(&[5], uniform(&mut rng, 5, -1.0, 1.0))],
        &|t, v| t.sum(v[0]),
        &|x| x[0].iter().sum(),
    ));

    let r = uniform(&mut rng, 5, -1.0, 1.0);
    out.extend(check(
        "mul",
        &[input(&[5], uniform(&mut rng, 5, -1.0, 1.0)), input(&[5], uniform(&mut rng, 5, -1.0, 1.0))],
        &|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect::<Vec<_>>()),
    ));

    let factor = rng.random_range(-3.0..3.0);
    out.extend(check(
        "scale",
        &[input(&[5], uniform(&mut rng, 5, -1.0, 1.0))],
        &|t, v| {
            let y = t.scale(v[0], factor)?;
            project(t, y, &r)
        },
        &|x| dot(&r, &x[0].iter().map(|v| v * factor).collect::<Vec<_>>()),
    ));

    let start = rng.random_range(0..4);
    let r3 = uniform(&mut rng, 3, -1.0, 1.0);
    out.extend(check(
        "slice",
        &[input(&[7], uniform(&mut rng, 7, -1.0, 1.0))],
        &|t, v| {
            let y = t.slice(v[0], start, 3)?;
            project(t, y, &r3)
        },
        &|x| dot(&r3, &x[0][start..start + 3]),
    ));

    out.extend(check(
        "squared_distance",
        &[input(&[5], uniform(&mut rng, 5, -1.0, 1.0)), input(&[5], uniform(&mut rng, 5, -1.0, 1.0))],
        &|t, v| t.squared_distance(v[0], v[1]),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum(),
    ));

    let target = rng.random_range(0.0..1.0);
    out.extend(check(
        "squared_error",
        &[input(&[], vec![rng.random_range(-1.0..2.0)])],
        &|t, v| t.squared_error(v[0], target),
        &|x| (x[0][0] - target).powi(2),
    ));

    let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    out.extend(check(
        "weighted_sum",
        &[
            input(&[], vec![rng.random_range(-1.0..1.0)]),
            input(&[], vec![rng.random_range(-1.0..1.0)]),
            input(&[], vec![rng.random_range(-1.0..1.0)]),
        ],
        &|t, v| t.weighted_sum(&[(v[0], w[0]), (v[1], w[1]), (v[2], w[2])]),
        &|x| (0..3).map(|i| w[i] * x[i][0]).sum(),
    ));

    out
}
