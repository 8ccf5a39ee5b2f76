use super::MitigationError;
use crate::Group;
use serde::{Deserialize, Serialize};

/// Default stabilizer added to every group count.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Inverse-frequency group weights.
///
/// `raw_weights[g] = total / (counts[g] + epsilon)` and
/// `normalized_weights[g] = raw_weights[g] / sum(raw_weights)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeighting {
    pub group_ids: Vec<Group>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub epsilon: f64,
    pub raw_weights: Vec<f64>,
    pub normalized_weights: Vec<f64>,
}

impl GroupWeighting {
    pub fn weight_of(&self, group: &Group) -> Option<f64> {
        self.group_ids
            .iter()
            .position(|g| g == group)
            .map(|i| self.normalized_weights[i])
    }
}

/// Computes the weighting for the groups in the given order.
pub fn compute_group_weights(counts: &[(Group, usize)], epsilon: f64) -> Result<GroupWeighting, MitigationError> {
    if counts.is_empty() {
        return Err(MitigationError::EmptyGrouping);
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MitigationError::InvalidEpsilon(epsilon));
    }
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(MitigationError::AllZeroCounts);
    }
    let raw_weights: Vec<f64> = counts
        .iter()
        .map(|&(_, n)| total as f64 / (n as f64 + epsilon))
        .collect();
    let sum: f64 = raw_weights.iter().sum();
    let normalized_weights = raw_weights.iter().map(|w| w / sum).collect();
    Ok(GroupWeighting {
        group_ids: counts.iter().map(|(g, _)| g.clone()).collect(),
        counts: counts.iter().map(|&(_, n)| n).collect(),
        total,
        epsilon,
        raw_weights,
        normalized_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(s: &str) -> Group {
        Group::from(s)
    }

    #[test]
    fn severe_imbalance_weights() {
        let w = compute_group_weights(&[(g("W"), 4221), (g("B"), 15)], DEFAULT_EPSILON).unwrap();
        // Direct evaluation: w_W = 4236/4221.000001, w_B = 4236/15.000001.
        assert!((w.normalized_weights[1] - 0.996_459).abs() < 1e-6, "{:?}", w.normalized_weights);
        assert!((w.normalized_weights[0] - 0.003_541).abs() < 1e-6);
        assert_eq!(w.total, 4236);
    }

    #[test]
    fn equal_counts_give_equal_weights() {
        let w = compute_group_weights(&[(g("A"), 10), (g("B"), 10)], DEFAULT_EPSILON).unwrap();
        assert!((w.normalized_weights[0] - 0.5).abs() < 1e-15);
        assert!((w.normalized_weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_to_three() {
        // w_A = 4/1, w_B = 4/3, so normalized 0.75 / 0.25.
        let w = compute_group_weights(&[(g("A"), 1), (g("B"), 3)], DEFAULT_EPSILON).unwrap();
        assert!((w.normalized_weights[0] - 0.75).abs() < 1e-6);
        assert!((w.normalized_weights[1] - 0.25).abs() < 1e-6);
        assert_eq!(w.weight_of(&g("B")), Some(w.normalized_weights[1]));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(compute_group_weights(&[], 1e-6), Err(MitigationError::EmptyGrouping));
        assert_eq!(
            compute_group_weights(&[(g("A"), 0), (g("B"), 0)], 1e-6),
            Err(MitigationError::AllZeroCounts)
        );
    }

    proptest! {
        #[test]
        fn normalization_holds(counts in prop::collection::vec(0usize..100_000, 1..6)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let labelled: Vec<_> = counts.iter().enumerate().map(|(i, &c)| (g(&format!("g{i}")), c)).collect();
            let w = compute_group_weights(&labelled, DEFAULT_EPSILON).unwrap();
            let sum: f64 = w.normalized_weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.normalized_weights.iter().all(|&x| x > 0.0));
            for i in 0..counts.len() {
                let expect = w.total as f64 / (counts[i] as f64 + DEFAULT_EPSILON);
                prop_assert!((w.raw_weights[i] - expect).abs() <= 1e-12 * expect);
                for j in 0..counts.len() {
                    let ratio = w.raw_weights[i] / w.raw_weights[j];
                    let want = (counts[j] as f64 + DEFAULT_EPSILON) / (counts[i] as f64 + DEFAULT_EPSILON);
                    prop_assert!((ratio - want).abs() <= 1e-9 * want.max(1.0));
                }
            }
        }
    }
}
