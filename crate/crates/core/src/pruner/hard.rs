use crate::budgets::{validate_target, BudgetKind, NetworkShape};
use crate::error::{Error, Result};
use crate::models::HardMask;

/// Channel indices ordered by descending mask value, then descending
/// `secondary`; remaining ties keep (layer, channel) order because the flat
/// layout is layer-major.
fn ranking(z: &[f64], secondary: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| {
        let second = secondary.map_or(std::cmp::Ordering::Equal, |s| s[b].total_cmp(&s[a]));
        z[b].total_cmp(&z[a]).then(second).then(a.cmp(&b))
    });
    order
}

fn prefix_mask(layout: &[usize], order: &[usize], k: usize) -> Vec<f64> {
    let mut values = vec![0.0; layout.iter().sum()];
    for &i in &order[..k] {
        values[i] = 1.0;
    }
    values
}

/// Thresholds mask values into a binary mask meeting the budget.
///
/// The channel budget keeps the `floor(V0·p)` largest values. Other budgets
/// take the longest prefix of the ranking whose budget stays within `V0`,
/// found by binary search since the budget grows along the ranking.
pub fn hard_prune(z: &[f64], kind: BudgetKind, target: f64, shape: &NetworkShape) -> Result<HardMask> {
    hard_prune_ranked(z, None, kind, target, shape)
}

/// [`hard_prune`] with ties in `z` broken by descending `secondary`.
///
/// Masks that saturate to exactly 0 or 1 in floating point still differ in
/// their underlying ψ, which orders them the same way `z` would with
/// unlimited precision.
pub fn hard_prune_ranked(
    z: &[f64],
    secondary: Option<&[f64]>,
    kind: BudgetKind,
    target: f64,
    shape: &NetworkShape,
) -> Result<HardMask> {
    validate_target(target)?;
    let layout = shape.mask_layout();
    let p = shape.mask_len();
    if p == 0 {
        return Err(Error::Config("the network has no prunable channels".into()));
    }
    if z.len() != p {
        return Err(Error::Layout(format!("{} mask values for {p} channels", z.len())));
    }
    if let Some(bad) = z.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("mask value {bad} outside [0, 1]")));
    }
    if secondary.is_some_and(|s| s.len() != p) {
        return Err(Error::Layout(format!("tie-break keys do not match {p} channels")));
    }
    let order = ranking(z, secondary);
    let budget_of = |k: usize| kind.evaluate(shape, &prefix_mask(&layout, &order, k));
    let k = match kind {
        BudgetKind::Channel => {
            // unprunable layers always count as kept
            let total = shape.total_channels();
            let fixed = total - p;
            let allowed = (target * total as f64 + 1e-9).floor() as usize;
            if allowed <= fixed {
                return Err(Error::InfeasibleBudget { target, minimum: (fixed + 1) as f64 / total as f64 });
            }
            (allowed - fixed).min(p)
        }
        _ => {
            let first = budget_of(1)?;
            if first > target {
                return Err(Error::InfeasibleBudget { target, minimum: first });
            }
            // invariant: budget_of(lo) <= target < budget_of(hi) (hi = p + 1 acts as +inf)
            let (mut lo, mut hi) = (1usize, p + 1);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if budget_of(mid)? <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
    };
    let keep = prefix_mask(&layout, &order, k).into_iter().map(|v| v == 1.0).collect();
    HardMask::new(layout, keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_example() {
        let shape = NetworkShape::chain(1, &[(4, 1, 1)]).unwrap();
        let m = hard_prune(&[0.9, 0.7, 0.2, 0.1], BudgetKind::Channel, 0.5, &shape).unwrap();
        assert_eq!(m.keep(), &[true, true, false, false]);
        let m = hard_prune(&[1.0; 4], BudgetKind::Channel, 1.0, &shape).unwrap();
        assert_eq!(m.kept(), 4);
        for kind in BudgetKind::ALL {
            assert_eq!(hard_prune(&[1.0; 4], kind, 1.0, &shape).unwrap().kept(), 4);
        }
    }

    #[test]
    fn ties_prefer_lower_layers_then_channels() {
        let shape = NetworkShape::chain(1, &[(2, 1, 1), (2, 1, 1)]).unwrap();
        let m = hard_prune(&[0.5, 1.0, 1.0, 1.0], BudgetKind::Channel, 0.5, &shape).unwrap();
        assert_eq!(m.keep(), &[false, true, true, false]);
    }

    #[test]
    fn secondary_key_breaks_saturated_ties() {
        let shape = NetworkShape::chain(1, &[(2, 1, 1), (2, 1, 1)]).unwrap();
        let psi = [9.0, 8.0, 12.0, 3.0];
        let m = hard_prune_ranked(&[1.0; 4], Some(&psi), BudgetKind::Channel, 0.5, &shape).unwrap();
        assert_eq!(m.keep(), &[true, false, true, false]);
        assert!(hard_prune_ranked(&[1.0; 4], Some(&psi[..3]), BudgetKind::Channel, 0.5, &shape).is_err());
    }

    #[test]
    fn infeasible_budget_names_minimum() {
        let shape = NetworkShape::chain(1, &[(4, 1, 1)]).unwrap();
        match hard_prune(&[0.5; 4], BudgetKind::Channel, 0.2, &shape) {
            Err(Error::InfeasibleBudget { minimum, .. }) => assert_eq!(minimum, 0.25),
            other => panic!("{other:?}"),
        }
        let shape = NetworkShape::chain(3, &[(2, 4, 9), (2, 4, 9)]).unwrap();
        assert!(matches!(
            hard_prune(&[0.9, 0.8, 0.7, 0.6], BudgetKind::Parameter, 0.01, &shape),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(hard_prune(&[0.5; 4], BudgetKind::Volume, 0.0, &shape).is_err());
    }
}
