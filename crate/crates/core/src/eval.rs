//! Accuracy, seen–unseen curve and out-of-distribution metrics.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::ClassId;

/// Correct / total counts for one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

fn class_counts(predictions: &[ClassId], truths: &[ClassId], class_set: &[ClassId]) -> Result<BTreeMap<ClassId, ClassCount>> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    let mut counts: BTreeMap<ClassId, ClassCount> =
        class_set.iter().map(|&c| (c, ClassCount { correct: 0, total: 0 })).collect();
    for (&p, &t) in predictions.iter().zip(truths) {
        let entry = counts.get_mut(&t).ok_or(Error::UnknownClass(t))?;
        entry.total += 1;
        entry.correct += (p == t) as usize;
    }
    if let Some((&c, _)) = counts.iter().find(|(_, v)| v.total == 0) {
        return Err(Error::EmptyClass(c));
    }
    Ok(counts)
}

fn mean_of_class_accuracies(counts: &BTreeMap<ClassId, ClassCount>) -> f64 {
    counts.values().map(|c| c.correct as f64 / c.total as f64).sum::<f64>() / counts.len() as f64
}

/// Mean over classes of the within-class accuracy.
pub fn per_class_accuracy(predictions: &[ClassId], truths: &[ClassId], class_set: &[ClassId]) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(mean_of_class_accuracies(&class_counts(predictions, truths, class_set)?))
}

/// `2·ts·tr / (ts + tr)`, zero when either side is zero.
pub fn harmonic_acc(acc_ts: f64, acc_tr: f64) -> f64 {
    if acc_ts <= 0.0 || acc_tr <= 0.0 {
        0.0
    } else {
        2.0 * acc_ts * acc_tr / (acc_ts + acc_tr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_tr: f64,
    pub acc_ts: f64,
    pub acc_h: f64,
    pub seen_counts: BTreeMap<ClassId, ClassCount>,
    pub unseen_counts: BTreeMap<ClassId, ClassCount>,
}

impl MetricsReport {
    /// Split samples by whether their true class is seen or unseen and score each side.
    /// Only classes that actually occur among the truths are averaged over.
    pub fn from_predictions(
        predictions: &[ClassId],
        truths: &[ClassId],
        seen_classes: &[ClassId],
        unseen_classes: &[ClassId],
    ) -> Result<MetricsReport> {
        if predictions.len() != truths.len() {
            return Err(Error::DimensionMismatch {
                expected: truths.len(),
                got: predictions.len(),
            });
        }
        let seen: HashSet<ClassId> = seen_classes.iter().copied().collect();
        let unseen: HashSet<ClassId> = unseen_classes.iter().copied().collect();
        let (mut sp, mut st, mut up, mut ut) = (vec![], vec![], vec![], vec![]);
        for (&p, &t) in predictions.iter().zip(truths) {
            if seen.contains(&t) {
                sp.push(p);
                st.push(t);
            } else if unseen.contains(&t) {
                up.push(p);
                ut.push(t);
            } else {
                return Err(Error::UnknownClass(t));
            }
        }
        let present = |truths: &[ClassId]| -> Vec<ClassId> {
            let mut v: Vec<ClassId> = truths.iter().copied().collect::<HashSet<_>>().into_iter().collect();
            v.sort();
            v
        };
        let seen_counts = class_counts(&sp, &st, &present(&st))?;
        let unseen_counts = class_counts(&up, &ut, &present(&ut))?;
        let acc_tr = if seen_counts.is_empty() { 0.0 } else { mean_of_class_accuracies(&seen_counts) };
        let acc_ts = if unseen_counts.is_empty() { 0.0 } else { mean_of_class_accuracies(&unseen_counts) };
        Ok(MetricsReport {
            acc_tr,
            acc_ts,
            acc_h: harmonic_acc(acc_ts, acc_tr),
            seen_counts,
            unseen_counts,
        })
    }
}

/// One operating point of the seen–unseen curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub beta: f64,
    pub acc_ts: f64,
    pub acc_tr: f64,
}

/// Evaluate `(acc_ts, acc_tr)` at every threshold in the grid. Points come back
/// in grid order; grid points are evaluated in parallel.
pub fn seen_unseen_curve<F>(evaluate: F, beta_grid: &[f64]) -> Result<Vec<CurvePoint>>
where
    F: Fn(f64) -> Result<(f64, f64)> + Sync,
{
    if beta_grid.is_empty() {
        return Err(Error::invalid("empty beta grid"));
    }
    if beta_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("beta grid must be strictly increasing"));
    }
    beta_grid
        .par_iter()
        .map(|&beta| {
            let (acc_ts, acc_tr) = evaluate(beta)?;
            Ok(CurvePoint { beta, acc_ts, acc_tr })
        })
        .collect()
}

/// The curve as the integrator sees it: sorted by `acc_ts`, duplicate x values
/// collapsed to their best `acc_tr`, anchored at `(0, max acc_tr)` on the left
/// and `(max acc_ts, 0)` on the right.
pub fn anchored_curve(points: &[CurvePoint]) -> Result<Vec<(f64, f64)>> {
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.acc_ts, p.acc_tr)).collect();
    if xy.iter().any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)) {
        return Err(Error::invalid("curve accuracies must lie in [0, 1]"));
    }
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    xy.dedup_by(|later, earlier| later.0 == earlier.0);
    let distinct: HashSet<(u64, u64)> = points.iter().map(|p| (p.acc_ts.to_bits(), p.acc_tr.to_bits())).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("AUSUC needs at least two distinct points"));
    }
    let max_y = xy.iter().map(|p| p.1).fold(0.0, f64::max);
    let max_x = xy.last().map(|p| p.0).unwrap_or(0.0);
    if xy[0].0 > 0.0 {
        xy.insert(0, (0.0, max_y));
    }
    if *xy.last().unwrap() != (max_x, 0.0) {
        xy.push((max_x, 0.0));
    }
    Ok(xy)
}

/// Area under the seen–unseen curve (trapezoidal rule over [`anchored_curve`]).
pub fn ausuc(points: &[CurvePoint]) -> Result<f64> {
    let xy = anchored_curve(points)?;
    Ok(xy.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::NeedBothLabels);
    }
    Ok((positives, negatives))
}

/// ROC AUC as the Mann–Whitney statistic `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, computed exactly.
pub fn ood_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut negatives_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos * negatives_below;
        ties += pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (positives as u64 * negatives as u64) as f64)
}

/// FPR at the largest threshold `t` with `TPR(score ≥ t) ≥ target`. Returns `(fpr, t)`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], target_tpr: f64) -> Result<(f64, f64)> {
    let (positives, negatives) = check_binary(scores, labels)?;
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::invalid(format!("target TPR {target_tpr} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 / positives as f64 >= target_tpr {
            return Ok((fp as f64 / negatives as f64, threshold));
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auc: f64,
    pub fpr_at_95_tpr: f64,
    pub threshold: f64,
}

/// Seen samples are the positive (in-distribution) class.
pub fn ood_report(scores: &[f64], is_seen: &[bool]) -> Result<OodReport> {
    let auc = ood_auc(scores, is_seen)?;
    let (fpr, threshold) = fpr_at_tpr(scores, is_seen, 0.95)?;
    Ok(OodReport {
        auc,
        fpr_at_95_tpr: fpr,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn per_class_examples() {
        let classes = ids(&[0, 1]);
        assert_eq!(per_class_accuracy(&ids(&[0, 0, 0, 0]), &ids(&[0, 0, 1, 1]), &classes).unwrap(), 0.5);
        assert_eq!(per_class_accuracy(&ids(&[0, 1]), &ids(&[0, 1]), &classes).unwrap(), 1.0);

        // counts {10, 90}, correct {5, 90}: per-class mean 0.75, per-sample mean would be 0.95
        let mut truths = vec![ClassId(0); 10];
        truths.extend(vec![ClassId(1); 90]);
        let mut preds = vec![ClassId(0); 5];
        preds.extend(vec![ClassId(1); 95]);
        assert_eq!(per_class_accuracy(&preds, &truths, &classes).unwrap(), 0.75);
    }

    #[test]
    fn per_class_errors() {
        assert!(matches!(
            per_class_accuracy(&ids(&[0]), &ids(&[0]), &ids(&[0, 1])),
            Err(Error::EmptyClass(ClassId(1)))
        ));
        assert!(matches!(
            per_class_accuracy(&ids(&[2]), &ids(&[2]), &ids(&[0])),
            Err(Error::UnknownClass(ClassId(2)))
        ));
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_acc(52.8, 80.0) - 63.6).abs() <= 0.05);
        assert!((harmonic_acc(44.9, 37.7) - 41.0).abs() <= 0.05);
        assert_eq!(harmonic_acc(0.0, 0.9), 0.0);
        assert!((harmonic_acc(0.4, 0.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ausuc_examples() {
        let p = |x: f64, y: f64| CurvePoint { beta: 0.0, acc_ts: x, acc_tr: y };
        assert_eq!(ausuc(&[p(0.0, 1.0), p(1.0, 0.0)]).unwrap(), 0.5);
        assert_eq!(ausuc(&[p(0.0, 1.0), p(1.0, 1.0), p(1.0, 0.0)]).unwrap(), 1.0);
        assert!(ausuc(&[p(0.5, 0.5)]).is_err());
        assert!(ausuc(&[p(0.5, 0.5), p(0.5, 0.5)]).is_err());
        // left anchor fills the strip before the first point
        assert!((ausuc(&[p(0.2, 0.8), p(0.6, 0.4)]).unwrap() - (0.2 * 0.8 + 0.4 * 0.6 + 0.0)).abs() < 1e-12);
    }

    #[test]
    fn ood_examples() {
        let labels = [true, true, false, false];
        assert_eq!(ood_auc(&[2.0, 3.0, 0.0, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(ood_auc(&[1.0; 4], &labels).unwrap(), 0.5);
        assert_eq!(ood_auc(&[1.0, 3.0, 2.0, 4.0], &labels).unwrap(), 0.25);
        assert!(matches!(ood_auc(&[1.0, 2.0], &[true, true]), Err(Error::NeedBothLabels)));

        assert_eq!(fpr_at_tpr(&[2.0, 3.0, 0.0, 1.0], &labels, 0.95).unwrap(), (0.0, 2.0));
        assert_eq!(fpr_at_tpr(&[1.0; 4], &labels, 0.95).unwrap(), (1.0, 1.0));
        assert!(fpr_at_tpr(&[1.0], &[false], 0.95).is_err());
    }

    #[test]
    fn curve_in_grid_order() {
        let grid = [-1e9, -1.0, 0.0, 2.0];
        let pts = seen_unseen_curve(|b| Ok((if b > 0.0 { 1.0 } else { 0.0 }, 0.5)), &grid).unwrap();
        assert_eq!(pts.iter().map(|p| p.beta).collect::<Vec<_>>(), grid);
        assert!(seen_unseen_curve(|_| Ok((0.0, 0.0)), &[]).is_err());
        assert!(seen_unseen_curve(|_| Ok((0.0, 0.0)), &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_properties(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let h = harmonic_acc(a, b);
            prop_assert_eq!(h, harmonic_acc(b, a));
            prop_assert!(h <= (2.0 * a).min(2.0 * b) + 1e-15);
            prop_assert!(h <= a.max(b) + 1e-15 && h >= 0.0);
        }

        #[test]
        fn per_class_invariant_to_duplication(
            pairs in prop::collection::vec((0u32..4, 0u32..4), 1..60),
            k in 1usize..4,
        ) {
            let truths: Vec<ClassId> = pairs.iter().map(|p| ClassId(p.0)).collect();
            let preds: Vec<ClassId> = pairs.iter().map(|p| ClassId(p.1)).collect();
            let mut classes: Vec<ClassId> = truths.clone();
            classes.sort();
            classes.dedup();
            let once = per_class_accuracy(&preds, &truths, &classes).unwrap();
            let rep_t: Vec<ClassId> = truths.iter().flat_map(|&t| std::iter::repeat_n(t, k)).collect();
            let rep_p: Vec<ClassId> = preds.iter().flat_map(|&t| std::iter::repeat_n(t, k)).collect();
            let many = per_class_accuracy(&rep_p, &rep_t, &classes).unwrap();
            prop_assert!((once - many).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..50),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(ood_auc(&scores, &labels).unwrap(), ood_auc(&transformed, &labels).unwrap());
        }

        #[test]
        fn ausuc_order_invariant(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30), seed in any::<u64>()) {
            let points: Vec<CurvePoint> = pts.iter().map(|&(x, y)| CurvePoint { beta: 0.0, acc_ts: x, acc_tr: y }).collect();
            let mut shuffled = points.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            match (ausuc(&points), ausuc(&shuffled)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
