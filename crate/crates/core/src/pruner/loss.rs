use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ndgrad::{Tape, Var};

/// How the crispness term aggregates over channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Squared L2 norm.
    Sum,
    /// Squared L2 norm divided by the channel count.
    Mean,
}

/// Tape handles of the joint loss and its three components.
#[derive(Clone, Copy, Debug)]
pub struct ChipnetLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub crispness: Var,
    pub budget: Var,
}

/// Scalar values of a [`ChipnetLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: f64,
    pub crispness: f64,
    pub budget: f64,
}

impl ChipnetLoss {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Var| tape.value(v).item() as f64;
        LossValues {
            total: get(self.total),
            cross_entropy: get(self.cross_entropy),
            crispness: get(self.crispness),
            budget: get(self.budget),
        }
    }
}

/// Records `L = Lce + α1·Lc + α2·(V − V0)²` on the tape, where
/// `budget_value` is the scalar budget `V` already recorded and `Lc` is
/// `‖z̃ − z‖²`, divided by the channel count under [`Reduction::Mean`].
#[allow(clippy::too_many_arguments)]
pub fn chipnet_loss(
    tape: &mut Tape,
    budget_value: Var,
    target: f64,
    z_tilde: Var,
    z: Var,
    logits: Var,
    labels: &[usize],
    alpha1: f64,
    alpha2: f64,
    reduction: Reduction,
) -> Result<ChipnetLoss> {
    let cross_entropy = tape.softmax_cross_entropy(logits, labels)?;
    let mut crispness = tape.squared_distance(z_tilde, z)?;
    if reduction == Reduction::Mean {
        let p = tape.value(z).numel().max(1);
        crispness = tape.scale(crispness, 1.0 / p as f64)?;
    }
    let budget = tape.squared_error(budget_value, target)?;
    let total = tape.weighted_sum(&[(cross_entropy, 1.0), (crispness, alpha1), (budget, alpha2)])?;
    Ok(ChipnetLoss { total, cross_entropy, crispness, budget })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::budgets::{BudgetKind, NetworkShape};
    use crate::ndgrad::Tensor;

    struct Case {
        psi: Vec<f32>,
        logits: Vec<f32>,
        labels: Vec<usize>,
    }

    fn record(tape: &mut Tape, case: &Case, a1: f64, a2: f64) -> (ChipnetLoss, Var, Var) {
        let shape = Arc::new(NetworkShape::chain(2, &[(2, 4, 9), (2, 1, 9)]).unwrap());
        let psi = tape.leaf(Tensor::from_vec(case.psi.clone()).with_requires_grad(true)).unwrap();
        let zt = tape.logistic(psi, 1.3, 0.0).unwrap();
        let z = tape.heaviside(zt, 4.0).unwrap();
        let zb = tape.logistic(z, 20.0, 0.5).unwrap();
        let v = tape.budget(zb, BudgetKind::Flops, shape).unwrap();
        let logits = tape
            .leaf(Tensor::new(vec![2, 3], case.logits.clone()).unwrap().with_requires_grad(true))
            .unwrap();
        let loss = chipnet_loss(tape, v, 0.4, zt, z, logits, &case.labels, a1, a2, Reduction::Sum).unwrap();
        (loss, psi, logits)
    }

    fn case() -> Case {
        Case { psi: vec![0.3, -0.2, 1.1, 0.05], logits: vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7], labels: vec![2, 0] }
    }

    #[test]
    fn total_is_weighted_sum_of_parts() {
        let mut tape = Tape::new();
        let (loss, _, _) = record(&mut tape, &case(), 10.0, 30.0);
        let v = loss.values(&tape);
        assert!((v.total - (v.cross_entropy + 10.0 * v.crispness + 30.0 * v.budget)).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let mut tape = Tape::new();
        let (loss, _, _) = record(&mut tape, &case(), 0.0, 0.0);
        let v = loss.values(&tape);
        assert_eq!(v.total, v.cross_entropy);
    }

    #[test]
    fn saturated_masks_at_target_with_perfect_logits_vanish() {
        let mut tape = Tape::new();
        let shape = Arc::new(NetworkShape::chain(1, &[(4, 1, 1)]).unwrap());
        let zt = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0])).unwrap();
        let z = tape.heaviside(zt, 8.0).unwrap();
        let v = tape.budget(z, BudgetKind::Channel, shape).unwrap();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap()).unwrap();
        let loss = chipnet_loss(&mut tape, v, 0.5, zt, z, logits, &[0], 10.0, 30.0, Reduction::Mean).unwrap();
        assert!(loss.values(&tape).total < 1e-12);
    }

    #[test]
    fn gradient_of_total_is_sum_of_component_gradients() {
        let c = case();
        let (a1, a2) = (10.0, 30.0);
        let mut tape = Tape::new();
        let (loss, psi, logits) = record(&mut tape, &c, a1, a2);
        let g = tape.backward(loss.total).unwrap();
        let (gp, gl) = (g.get(psi).unwrap().clone(), g.get(logits).unwrap().clone());

        let mut summed_p = vec![0.0f64; 4];
        let mut summed_l = vec![0.0f64; 6];
        for (pick, weight) in [(0usize, 1.0), (1, a1), (2, a2)] {
            let mut tape = Tape::new();
            let (loss, psi, logits) = record(&mut tape, &c, a1, a2);
            let part = [loss.cross_entropy, loss.crispness, loss.budget][pick];
            let g = tape.backward(part).unwrap();
            for (s, v) in summed_p.iter_mut().zip(g.get(psi).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 4])) {
                *s += weight * v as f64;
            }
            for (s, v) in summed_l.iter_mut().zip(g.get(logits).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 6])) {
                *s += weight * v as f64;
            }
        }
        for (a, b) in gp.data().iter().zip(&summed_p).chain(gl.data().iter().zip(&summed_l)) {
            assert!((*a as f64 - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
