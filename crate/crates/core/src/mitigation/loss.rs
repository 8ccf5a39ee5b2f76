//! Per-sample segmentation losses and the group-level wrappers that combine
//! them into one batch objective.
//!
//! Every wrapper is linear in the per-sample losses once the active groups
//! (and, for Group DRO, the worst group) are fixed, so each one is expressed
//! as a coefficient vector: `batch_loss = sum_i coeff[i] * loss[i]`. The
//! trainer backpropagates each sample with its coefficient.

use super::{GroupWeighting, MitigationError};
use crate::trainer::layers::Scalar;
use crate::{Group, Label};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Soft-Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    SoftDice,
    CeDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWrapper {
    None,
    Reweigh,
    GroupDro,
    /// Group DRO over weight-scaled group means.
    ReweighGroupDro,
}

/// Loss of one sample from per-pixel class scores `[classes, H, W]`.
///
/// Scores must be nonnegative; each pixel's scores are normalized by their
/// sum before use.
pub fn segmentation_loss(scores: &Array3<f64>, target: &Array2<Label>, kind: LossKind) -> Result<f64, MitigationError> {
    let (c, h, w) = scores.dim();
    if (h, w) != target.dim() || c < 2 {
        return Err(MitigationError::ShapeMismatch(format!(
            "scores {:?} vs target {:?}",
            scores.dim(),
            target.dim()
        )));
    }
    let mut probs = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let total: f64 = (0..c).map(|q| scores[[q, i, j]]).sum();
                probs.push(scores[[k, i, j]] / total);
            }
        }
    }
    let labels: Vec<Label> = target.iter().copied().collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(MitigationError::ShapeMismatch(format!("label {bad} has no score channel")));
    }
    let hw = h * w;
    let ce = || -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[l as usize * hw + i].ln())
            .sum::<f64>()
            / hw as f64
    };
    let dice = || 1.0 - soft_dice_terms(&probs, &labels, c, DICE_SMOOTH).iter().map(|t| t.dice).sum::<f64>() / (c - 1) as f64;
    Ok(match kind {
        LossKind::Ce => ce(),
        LossKind::SoftDice => dice(),
        LossKind::CeDice => ce() + dice(),
    })
}

struct DiceTerm {
    dice: f64,
    intersection: f64,
    denominator: f64,
}

fn soft_dice_terms<T: Scalar>(probs: &[T], labels: &[Label], classes: usize, smooth: f64) -> Vec<DiceTerm> {
    let hw = labels.len();
    (1..classes)
        .map(|k| {
            let p = &probs[k * hw..(k + 1) * hw];
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for (pv, &l) in p.iter().zip(labels) {
                let pv = pv.to_f64().unwrap_or(f64::NAN);
                psum += pv;
                if l as usize == k {
                    inter += pv;
                    gsum += 1.0;
                }
            }
            let denominator = psum + gsum + smooth;
            DiceTerm {
                dice: (2.0 * inter + smooth) / denominator,
                intersection: inter,
                denominator,
            }
        })
        .collect()
}

/// Loss and `d loss / d logits` of one sample. `logits` is `[classes, HW]`.
pub fn loss_and_grad_from_logits<T: Scalar>(
    logits: &[T],
    target: &[Label],
    classes: usize,
    kind: LossKind,
) -> (f64, Vec<T>) {
    let hw = target.len();
    assert_eq!(logits.len(), classes * hw);
    // Softmax per pixel.
    let mut probs = vec![T::zero(); logits.len()];
    for i in 0..hw {
        let mut m = logits[i];
        for k in 1..classes {
            m = m.max(logits[k * hw + i]);
        }
        let mut z = T::zero();
        for k in 0..classes {
            let e = (logits[k * hw + i] - m).exp();
            probs[k * hw + i] = e;
            z += e;
        }
        for k in 0..classes {
            probs[k * hw + i] = probs[k * hw + i] / z;
        }
    }
    let n = T::lit(hw as f64);
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    if matches!(kind, LossKind::Ce | LossKind::CeDice) {
        let mut ce = T::zero();
        for i in 0..hw {
            let l = target[i] as usize;
            // log-softmax from the logits keeps tiny probabilities exact.
            let mut m = logits[i];
            for k in 1..classes {
                m = m.max(logits[k * hw + i]);
            }
            let lse = m + (0..classes).map(|k| (logits[k * hw + i] - m).exp()).sum::<T>().ln();
            ce += lse - logits[l * hw + i];
            for k in 0..classes {
                let y = if k == l { T::one() } else { T::zero() };
                grad[k * hw + i] = (probs[k * hw + i] - y) / n;
            }
        }
        loss += (ce / n).to_f64().unwrap_or(f64::NAN);
    }
    if matches!(kind, LossKind::SoftDice | LossKind::CeDice) {
        let terms = soft_dice_terms(&probs, target, classes, DICE_SMOOTH);
        let fg = (classes - 1) as f64;
        loss += 1.0 - terms.iter().map(|t| t.dice).sum::<f64>() / fg;
        // d loss / d p_k(x) for foreground k, zero for background.
        let mut dp = vec![T::zero(); logits.len()];
        for (t, k) in terms.iter().zip(1..classes) {
            let num = 2.0 * t.intersection + DICE_SMOOTH;
            let den2 = t.denominator * t.denominator;
            for i in 0..hw {
                let y = if target[i] as usize == k { 1.0 } else { 0.0 };
                let d_dice = (2.0 * y * t.denominator - num) / den2;
                dp[k * hw + i] = T::lit(-d_dice / fg);
            }
        }
        // Softmax Jacobian: dz_k = p_k (dp_k - sum_j p_j dp_j).
        for i in 0..hw {
            let dot = (0..classes).map(|k| probs[k * hw + i] * dp[k * hw + i]).sum::<T>();
            for k in 0..classes {
                grad[k * hw + i] += probs[k * hw + i] * (dp[k * hw + i] - dot);
            }
        }
    }
    (loss, grad)
}

fn check_lengths(losses: &[f64], groups: &[Group]) -> Result<(), MitigationError> {
    if losses.is_empty() {
        return Err(MitigationError::EmptyInput);
    }
    if losses.len() != groups.len() {
        return Err(MitigationError::LengthMismatch {
            losses: losses.len(),
            groups: groups.len(),
        });
    }
    Ok(())
}

/// Sample indices per group present in the batch, groups in sorted order.
fn members(groups: &[Group]) -> BTreeMap<&Group, Vec<usize>> {
    let mut m: BTreeMap<&Group, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        m.entry(g).or_default().push(i);
    }
    m
}

fn group_mean(losses: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| losses[i]).sum::<f64>() / idx.len() as f64
}

/// Present-group weights renormalized to sum to one.
fn present_weights(
    present: &BTreeMap<&Group, Vec<usize>>,
    weighting: &GroupWeighting,
) -> Result<Vec<f64>, MitigationError> {
    let raw = present
        .keys()
        .map(|g| weighting.weight_of(g).ok_or_else(|| MitigationError::UnknownGroup((*g).clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / s).collect())
}

/// `d batch_loss / d loss[i]` for each sample.
pub fn wrapper_coefficients(
    wrapper: LossWrapper,
    losses: &[f64],
    groups: &[Group],
    weighting: Option<&GroupWeighting>,
) -> Result<Vec<f64>, MitigationError> {
    check_lengths(losses, groups)?;
    let present = members(groups);
    let mut coeff = vec![0.0; losses.len()];
    let need_weights = || weighting.ok_or(MitigationError::MissingWeighting);
    match wrapper {
        LossWrapper::None => coeff.fill(1.0 / losses.len() as f64),
        LossWrapper::Reweigh => {
            let w = present_weights(&present, need_weights()?)?;
            for (wg, idx) in w.iter().zip(present.values()) {
                for &i in idx {
                    coeff[i] = wg / idx.len() as f64;
                }
            }
        }
        LossWrapper::GroupDro | LossWrapper::ReweighGroupDro => {
            let scale = if wrapper == LossWrapper::ReweighGroupDro {
                let k = present.len() as f64;
                present_weights(&present, need_weights()?)?
                    .into_iter()
                    .map(|w| w * k)
                    .collect()
            } else {
                vec![1.0; present.len()]
            };
            // First maximal group in sorted order wins ties.
            let mut best: Option<(f64, usize)> = None;
            for (k, idx) in present.values().enumerate() {
                let v = scale[k] * group_mean(losses, idx);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, k));
                }
            }
            let (_, k) = best.expect("nonempty batch has a group");
            let idx = present.values().nth(k).expect("index in range");
            for &i in idx {
                coeff[i] = scale[k] / idx.len() as f64;
            }
        }
    }
    Ok(coeff)
}

fn combine(coeff: &[f64], losses: &[f64]) -> f64 {
    coeff.iter().zip(losses).map(|(c, l)| c * l).sum()
}

/// Weighted mean of group means, weights renormalized over present groups.
pub fn reweighted_loss(losses: &[f64], groups: &[Group], weighting: &GroupWeighting) -> Result<f64, MitigationError> {
    let c = wrapper_coefficients(LossWrapper::Reweigh, losses, groups, Some(weighting))?;
    Ok(combine(&c, losses))
}

/// Largest group-mean loss among the groups present in the batch.
pub fn group_dro_loss(losses: &[f64], groups: &[Group]) -> Result<f64, MitigationError> {
    check_lengths(losses, groups)?;
    Ok(members(groups)
        .values()
        .map(|idx| group_mean(losses, idx))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Applies any wrapper; `weighting` is required by the reweighing variants.
pub fn wrapped_loss(
    wrapper: LossWrapper,
    losses: &[f64],
    groups: &[Group],
    weighting: Option<&GroupWeighting>,
) -> Result<f64, MitigationError> {
    let c = wrapper_coefficients(wrapper, losses, groups, weighting)?;
    Ok(combine(&c, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mitigation::compute_group_weights;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn g(s: &str) -> Group {
        Group::from(s)
    }

    fn weighting(a: f64) -> GroupWeighting {
        // Hand-built weighting with normalized weights {A: a, B: 1-a}.
        GroupWeighting {
            group_ids: vec![g("A"), g("B")],
            counts: vec![1, 1],
            total: 2,
            epsilon: 1e-6,
            raw_weights: vec![a, 1.0 - a],
            normalized_weights: vec![a, 1.0 - a],
        }
    }

    #[test]
    fn reweighted_examples() {
        let v = reweighted_loss(&[1.0, 3.0], &[g("A"), g("B")], &weighting(0.25)).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        let v = reweighted_loss(&[1.0, 3.0, 4.0, 4.0], &[g("A"), g("A"), g("B"), g("B")], &weighting(0.5)).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
        let v = reweighted_loss(&[1.0, 2.0], &[g("A"), g("A")], &weighting(0.1)).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn reweighted_rejects_unknown_group() {
        assert_eq!(
            reweighted_loss(&[1.0], &[g("C")], &weighting(0.5)),
            Err(MitigationError::UnknownGroup(g("C")))
        );
    }

    #[test]
    fn dro_examples() {
        let v = group_dro_loss(&[0.2, 0.4, 0.1], &[g("A"), g("A"), g("B")]).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        let v = group_dro_loss(&[0.7; 5], &[g("A"), g("B"), g("A"), g("B"), g("C")]).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        let v = group_dro_loss(&[1.0, 2.0, 6.0], &vec![g("A"); 3]).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrappers_reject_bad_lengths() {
        assert_eq!(group_dro_loss(&[], &[]), Err(MitigationError::EmptyInput));
        assert!(matches!(
            group_dro_loss(&[1.0], &[g("A"), g("B")]),
            Err(MitigationError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dro_gradient_only_touches_the_worst_group() {
        let losses = [0.2, 0.4, 0.1, 0.05];
        let groups = [g("A"), g("A"), g("B"), g("B")];
        let c = wrapper_coefficients(LossWrapper::GroupDro, &losses, &groups, None).unwrap();
        assert_eq!(c, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn combined_reweighed_dro_reduces_to_dro_with_equal_weights() {
        let w = compute_group_weights(&[(g("A"), 5), (g("B"), 5)], 1e-6).unwrap();
        let losses = [0.2, 0.4, 0.1];
        let groups = [g("A"), g("A"), g("B")];
        let a = wrapped_loss(LossWrapper::ReweighGroupDro, &losses, &groups, Some(&w)).unwrap();
        let b = group_dro_loss(&losses, &groups).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn one_hot(target: &Array2<Label>, classes: usize) -> Array3<f64> {
        let (h, w) = target.dim();
        Array3::from_shape_fn((classes, h, w), |(k, i, j)| if target[[i, j]] as usize == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let target = Array2::from_shape_fn((128, 128), |(i, j)| ((i / 20 + j / 30) % 4) as Label);
        let scores = one_hot(&target, 4);
        assert_eq!(segmentation_loss(&scores, &target, LossKind::Ce).unwrap(), 0.0);
        let d = segmentation_loss(&scores, &target, LossKind::SoftDice).unwrap();
        assert!(d.abs() < 1e-3, "{d}");
    }

    #[test]
    fn uniform_scores_cost_ln_four() {
        let target = Array2::from_elem((1, 1), 0 as Label);
        let scores = Array3::from_elem((4, 1, 1), 0.25);
        let ce = segmentation_loss(&scores, &target, LossKind::Ce).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn absent_class_contributes_no_dice_loss() {
        // Class 3 is absent from target and prediction; classes 1 and 2 are perfect.
        let target = Array2::from_shape_fn((4, 4), |(i, _)| (i % 3) as Label);
        let scores = one_hot(&target, 4);
        let d = segmentation_loss(&scores, &target, LossKind::SoftDice).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let target = Array2::from_elem((3, 3), 0 as Label);
        let scores = Array3::from_elem((4, 2, 3), 0.25);
        assert!(matches!(
            segmentation_loss(&scores, &target, LossKind::Ce),
            Err(MitigationError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logits_route_matches_score_route() {
        let target = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 4) as Label);
        let logits: Vec<f64> = (0..4 * 30).map(|i| ((i as f64) * 0.37).sin() * 2.0).collect();
        let mut scores = Array3::zeros((4, 5, 6));
        for ((k, i, j), v) in scores.indexed_iter_mut() {
            *v = logits[k * 30 + i * 6 + j].exp();
        }
        let labels: Vec<Label> = target.iter().copied().collect();
        for kind in [LossKind::Ce, LossKind::SoftDice, LossKind::CeDice] {
            let (l, _) = loss_and_grad_from_logits(&logits, &labels, 4, kind);
            let r = segmentation_loss(&scores, &target, kind).unwrap();
            assert!((l - r).abs() < 1e-12, "{kind:?}: {l} vs {r}");
        }
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let labels: Vec<Label> = (0..12).map(|i| (i % 4) as Label).collect();
        let logits: Vec<f64> = (0..48).map(|i| ((i as f64) * 0.91).cos()).collect();
        for kind in [LossKind::Ce, LossKind::SoftDice, LossKind::CeDice] {
            let (_, grad) = loss_and_grad_from_logits(&logits, &labels, 4, kind);
            for i in 0..logits.len() {
                let mut p = logits.clone();
                p[i] += 1e-6;
                let up = loss_and_grad_from_logits(&p, &labels, 4, kind).0;
                p[i] -= 2e-6;
                let down = loss_and_grad_from_logits(&p, &labels, 4, kind).0;
                let fd = (up - down) / 2e-6;
                assert!((fd - grad[i]).abs() < 1e-7, "{kind:?} {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn ce_is_additive_over_samples() {
        // Mean of per-sample CE equals CE over the pooled pixels.
        let labels: Vec<Label> = (0..20).map(|i| (i % 4) as Label).collect();
        let logits: Vec<f64> = (0..80).map(|i| ((i as f64) * 0.53).sin()).collect();
        let pooled = loss_and_grad_from_logits(&logits, &labels, 4, LossKind::Ce).0;
        let split = |lo: usize, hi: usize| {
            let sub: Vec<f64> = (0..4).flat_map(|k| logits[k * 20 + lo..k * 20 + hi].to_vec()).collect();
            loss_and_grad_from_logits(&sub, &labels[lo..hi], 4, LossKind::Ce).0
        };
        let per_sample = (split(0, 10) + split(10, 20)) / 2.0;
        assert!((pooled - per_sample).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn dro_dominates_the_plain_mean(
            losses in prop::collection::vec(0.0f64..5.0, 1..24),
            picks in prop::collection::vec(0usize..3, 24),
        ) {
            let groups: Vec<Group> = losses.iter().enumerate().map(|(i, _)| g(["A", "B", "C"][picks[i]])).collect();
            let dro = group_dro_loss(&losses, &groups).unwrap();
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            prop_assert!(dro >= mean - 1e-12);
        }

        #[test]
        fn uniform_reweighing_equals_dro_when_group_means_agree(c in 0.0f64..10.0, n in 1usize..6) {
            let w = compute_group_weights(&[(g("A"), 3), (g("B"), 3)], 1e-6).unwrap();
            let losses = vec![c; 2 * n];
            let groups: Vec<Group> = (0..2 * n).map(|i| if i % 2 == 0 { g("A") } else { g("B") }).collect();
            let r = reweighted_loss(&losses, &groups, &w).unwrap();
            let d = group_dro_loss(&losses, &groups).unwrap();
            prop_assert!((r - d).abs() < 1e-12 && (r - c).abs() < 1e-12);
        }
    }
}
