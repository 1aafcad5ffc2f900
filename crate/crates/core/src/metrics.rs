//! ROC analysis and classification metrics.
//!
//! Threshold semantics throughout: a score `>= threshold` predicts the
//! positive (critical) class. Operating points are exact; nothing is
//! interpolated between them.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{sigmoid, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("both classes must be present (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("no samples of critical class {0}")]
    NoCriticalSamples(usize),
    #[error("target TPR must be in [0, 1], got {0}")]
    BadTarget(f64),
    #[error("shape mismatch between ensemble members")]
    ShapeMismatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Operating points sorted by threshold, descending. The first point has an
/// infinite threshold and sits at (0, 0); the last admits everything.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    /// Writes `threshold,tpr,fpr` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "tpr", "fpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.tpr.to_string(), p.fpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn split_by_label(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch("scores vs labels"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    Ok((pos, neg))
}

/// Threshold sweep over every distinct score; tied scores form one point.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricsError> {
    let (pos, neg) = split_by_label(scores, labels)?;
    roc_from_groups(&pos, &neg)
}

pub fn roc_from_groups(positives: &[f64], negatives: &[f64]) -> Result<RocCurve, MetricsError> {
    let (np, nn) = (positives.len(), negatives.len());
    if np == 0 || nn == 0 {
        return Err(MetricsError::SingleClass {
            positives: np,
            negatives: nn,
        });
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
        true_positives: 0,
        false_positives: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / np as f64,
            fpr: fp as f64 / nn as f64,
            true_positives: tp,
            false_positives: fp,
        });
    }
    Ok(RocCurve {
        points,
        positives: np,
        negatives: nn,
    })
}

/// Mann-Whitney estimate: `(#{p > n} + 0.5 #{p = n}) / (P N)`, computed from
/// mid-ranks in `O((P + N) log (P + N))`.
pub fn auc_mann_whitney(positives: &[f64], negatives: &[f64]) -> Result<f64, MetricsError> {
    let (np, nn) = (positives.len(), negatives.len());
    if np == 0 || nn == 0 {
        return Err(MetricsError::SingleClass {
            positives: np,
            negatives: nn,
        });
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut pos_in_group = 0u128;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos_in_group += 1;
            }
            j += 1;
        }
        // 1-based ranks i+1..=j, mid-rank (i + 1 + j) / 2
        rank_sum_x2 += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let np128 = np as u128;
    let u_x2 = rank_sum_x2 - np128 * (np128 + 1);
    Ok(u_x2 as f64 / (2.0 * np as f64 * nn as f64))
}

pub fn auc_from_labels(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (pos, neg) = split_by_label(scores, labels)?;
    auc_mann_whitney(&pos, &neg)
}

/// Trapezoidal area under the curve.
pub fn auc_trapezoid(curve: &RocCurve) -> f64 {
    // Integrate in counts and divide once so the result is exact in the same
    // half-integer arithmetic as the rank statistic.
    let mut area_x2: u128 = 0;
    for w in curve.points.windows(2) {
        let dfp = (w[1].false_positives - w[0].false_positives) as u128;
        area_x2 += dfp * (w[1].true_positives + w[0].true_positives) as u128;
    }
    area_x2 as f64 / (2.0 * curve.positives as f64 * curve.negatives as f64)
}

/// Minimum FPR among operating points with TPR at or above the target.
pub fn fpr_at_tpr(curve: &RocCurve, target_tpr: f64) -> Result<f64, MetricsError> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(MetricsError::BadTarget(target_tpr));
    }
    let needed = required_count(target_tpr, curve.positives);
    Ok(curve
        .points
        .iter()
        .filter(|p| p.true_positives >= needed)
        .map(|p| p.fpr)
        .fold(f64::INFINITY, f64::min))
}

/// FPR when at most `k` positives may be missed (`target = 1 - k / P`).
pub fn fpr_at_false_negatives(curve: &RocCurve, k: usize) -> Result<f64, MetricsError> {
    let target = 1.0 - k as f64 / curve.positives as f64;
    if target <= 0.0 {
        return Ok(0.0);
    }
    fpr_at_tpr(curve, target)
}

// Smallest count c with c / total >= target, robust to the representation of
// decimal targets such as 0.95.
fn required_count(target: f64, total: usize) -> usize {
    let raw = target * total as f64;
    let c = (raw - 1e-9).ceil().max(0.0) as usize;
    c.min(total)
}

/// Result of thresholding one critical class's logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedError {
    /// Misclassification rate over samples not in the critical class.
    pub error: f64,
    pub threshold: f64,
    /// Achieved critical-class TPR.
    pub tpr: f64,
}

/// Picks the largest threshold on the critical logit whose critical-class TPR
/// reaches `target_tpr`, assigns every sample at or above it to the critical
/// class, classifies the rest by argmax over the remaining logits, and reports
/// the error on non-critical samples. `target_tpr = 0` assigns nothing to the
/// critical class.
pub fn multiclass_error_at_tpr(
    logits: &Matrix,
    labels: &[usize],
    critical: usize,
    target_tpr: f64,
) -> Result<ThresholdedError, MetricsError> {
    if logits.rows() != labels.len() {
        return Err(MetricsError::LengthMismatch("logits vs labels"));
    }
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(MetricsError::BadTarget(target_tpr));
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    let mut crit: Vec<f64> = (0..labels.len())
        .filter(|&i| labels[i] == critical)
        .map(|i| logits.get(i, critical))
        .collect();
    if crit.is_empty() {
        return Err(MetricsError::NoCriticalSamples(critical));
    }
    crit.sort_by(|a, b| b.total_cmp(a));
    let needed = required_count(target_tpr, crit.len());
    let threshold = if needed == 0 { f64::INFINITY } else { crit[needed - 1] };
    let tpr = crit.iter().filter(|&&v| v >= threshold).count() as f64 / crit.len() as f64;

    let mut wrong = 0usize;
    let mut total = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == critical {
            continue;
        }
        total += 1;
        let row = logits.row(i);
        let predicted = if row[critical] >= threshold {
            critical
        } else {
            argmax_excluding(row, critical)
        };
        if predicted != y {
            wrong += 1;
        }
    }
    let error = if total == 0 { 0.0 } else { wrong as f64 / total as f64 };
    Ok(ThresholdedError { error, threshold, tpr })
}

fn argmax_excluding(row: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in row.iter().enumerate() {
        if k == skip {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = k;
        }
    }
    best
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64, MetricsError> {
    if logits.rows() != labels.len() {
        return Err(MetricsError::LengthMismatch("logits vs labels"));
    }
    if labels.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary accuracy of sigmoid scores at 0.5.
pub fn binary_accuracy(probabilities: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if probabilities.len() != labels.len() {
        return Err(MetricsError::LengthMismatch("scores vs labels"));
    }
    if labels.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let hits = probabilities
        .iter()
        .zip(labels)
        .filter(|(p, &l)| (**p >= 0.5) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch("x vs y"));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Elementwise mean of several models' logits.
pub fn ensemble_logits(members: &[Matrix]) -> Result<Matrix, MetricsError> {
    let first = members.first().ok_or(MetricsError::TooFew { needed: 1, got: 0 })?;
    if members.iter().any(|m| m.shape() != first.shape()) {
        return Err(MetricsError::ShapeMismatch);
    }
    let k = members.len() as f64;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for m in members {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o += v;
        }
    }
    for o in out.as_mut_slice() {
        *o /= k;
    }
    Ok(out)
}

/// Sigmoid of a single-column logit matrix.
pub fn binary_probabilities(logits: &Matrix) -> Vec<f64> {
    logits.as_slice().iter().map(|&z| sigmoid(z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const POS: [f64; 3] = [0.9, 0.8, 0.3];
    const NEG: [f64; 4] = [0.7, 0.4, 0.2, 0.1];

    #[test]
    fn roc_matches_threshold_enumeration() {
        let curve = roc_from_groups(&POS, &NEG).unwrap();
        // enumerate every distinct score as a threshold
        let mut thresholds: Vec<f64> = POS.iter().chain(&NEG).copied().collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(curve.points.len(), thresholds.len() + 1);
        for (pt, &t) in curve.points[1..].iter().zip(&thresholds) {
            let tp = POS.iter().filter(|&&s| s >= t).count() as f64 / 3.0;
            let fp = NEG.iter().filter(|&&s| s >= t).count() as f64 / 4.0;
            assert_eq!((pt.threshold, pt.tpr, pt.fpr), (t, tp, fp));
        }
        assert_eq!((curve.points[0].tpr, curve.points[0].fpr), (0.0, 0.0));
        let last = curve.points.last().unwrap();
        assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
    }

    #[test]
    fn roc_degenerate_cases() {
        let sep = roc_from_groups(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert!(sep.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        let flat = roc_from_groups(&[0.5, 0.5], &[0.5]).unwrap();
        let pts: Vec<(f64, f64)> = flat.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc_trapezoid(&flat), 0.5);
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_mann_whitney(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_mann_whitney(&[0.3, 0.3], &[0.3]).unwrap(), 0.5);
        assert_eq!(auc_mann_whitney(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(auc_mann_whitney(&[], &[0.1]).is_err());
        let step = roc_from_groups(&[1.0], &[0.0]).unwrap();
        assert_eq!(auc_trapezoid(&step), 1.0);
    }

    #[test]
    fn fpr_at_tpr_examples() {
        let curve = roc_from_groups(&POS, &NEG).unwrap();
        assert_eq!(fpr_at_tpr(&curve, 0.95).unwrap(), 0.5);
        // threshold 0.8 already admits 2 of 3 positives and no negative
        assert_eq!(fpr_at_tpr(&curve, 0.6).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&curve, 0.7).unwrap(), 0.5);
        let sep = roc_from_groups(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        for t in [0.1, 0.5, 0.98, 1.0] {
            assert_eq!(fpr_at_tpr(&sep, t).unwrap(), 0.0);
        }
        assert!(fpr_at_tpr(&curve, 0.0).is_err());
        // 0 false negatives allowed == TPR 1
        assert_eq!(fpr_at_false_negatives(&curve, 0).unwrap(), fpr_at_tpr(&curve, 1.0).unwrap());
        assert_eq!(fpr_at_false_negatives(&curve, 1).unwrap(), 0.0);
    }

    #[test]
    fn decimal_targets_count_exactly() {
        assert_eq!(required_count(0.95, 20), 19);
        assert_eq!(required_count(0.98, 50), 49);
        assert_eq!(required_count(0.9, 10), 9);
        assert_eq!(required_count(0.92, 100), 92);
        assert_eq!(required_count(0.95, 21), 20);
    }

    #[test]
    fn multiclass_threshold_hand_example() {
        // class 2 is critical
        let logits = Matrix::from_rows(&[
            vec![2.0, 0.5, 0.1],  // y=0
            vec![0.2, 1.5, 0.9],  // y=1
            vec![1.0, 0.3, 1.2],  // y=0, critical logit 1.2
            vec![0.1, 0.2, 2.0],  // y=2
            vec![0.0, 0.4, 0.7],  // y=2
            vec![0.9, 1.1, 0.05], // y=1
        ])
        .unwrap();
        let labels = [0, 1, 0, 2, 2, 1];
        // TPR 1.0 -> threshold 0.7: rows 1 (0.9) and 2 (1.2) go to class 2
        let r = multiclass_error_at_tpr(&logits, &labels, 2, 1.0).unwrap();
        assert_eq!(r.threshold, 0.7);
        assert_eq!(r.error, 0.5);
        // TPR 0.5 -> threshold 2.0: nothing else crosses; argmax over {0, 1}
        // row 0 -> 0 ok, row 1 -> 1 ok, row 2 -> 0 ok, row 5 -> 1 ok
        let r = multiclass_error_at_tpr(&logits, &labels, 2, 0.5).unwrap();
        assert_eq!(r.threshold, 2.0);
        assert_eq!(r.error, 0.0);
        assert!(multiclass_error_at_tpr(&logits, &[0, 1, 0, 1, 1, 1], 2, 0.5).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // direct formula: mx=2, my=13/3; sxy=5, sxx=2, syy=38/3
        let expected = 5.0 / (2.0f64.sqrt() * (38.0f64 / 3.0).sqrt());
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap() - expected).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[2.0, 3.0]), Err(MetricsError::ZeroVariance(_))));
    }

    #[test]
    fn ensemble_examples() {
        let a = Matrix::column(&[0.3, -1.2]);
        let e = ensemble_logits(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(e, a);
        let neg = Matrix::column(&[-0.3, 1.2]);
        let e = ensemble_logits(&[a, neg]).unwrap();
        assert_eq!(binary_probabilities(&e), vec![0.5, 0.5]);
        assert!(ensemble_logits(&[Matrix::zeros(2, 1), Matrix::zeros(3, 1)]).is_err());
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            p in prop::collection::vec(-3.0f64..3.0, 1..40),
            n in prop::collection::vec(-3.0f64..3.0, 1..40),
        ) {
            let a = auc_mann_whitney(&p, &n).unwrap();
            let tp: Vec<f64> = p.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
            let tn: Vec<f64> = n.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(a, auc_mann_whitney(&tp, &tn).unwrap());
        }

        #[test]
        fn fpr_at_tpr_is_monotone(
            p in prop::collection::vec(0.0f64..1.0, 1..40),
            n in prop::collection::vec(0.0f64..1.0, 1..40),
            t1 in 0.01f64..1.0,
            t2 in 0.01f64..1.0,
        ) {
            let c = roc_from_groups(&p, &n).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(fpr_at_tpr(&c, lo).unwrap() <= fpr_at_tpr(&c, hi).unwrap());
        }

        #[test]
        fn flipped_labels_complement(
            p in prop::collection::hash_set(0u32..10_000, 1..30),
            n in prop::collection::hash_set(10_000u32..20_000, 1..30),
            shuffle in 0u32..10_000,
        ) {
            // distinct values guarantee tie-free data
            let ps: Vec<f64> = p.iter().map(|&v| ((v * 7919 + shuffle) % 20_000) as f64).collect();
            let ns: Vec<f64> = n.iter().map(|&v| ((v * 7919 + shuffle) % 20_000) as f64).collect();
            let mut all: Vec<f64> = ps.iter().chain(&ns).copied().collect();
            all.sort_by(f64::total_cmp);
            all.dedup();
            prop_assume!(all.len() == ps.len() + ns.len());
            let a = auc_mann_whitney(&ps, &ns).unwrap();
            let b = auc_mann_whitney(&ns, &ps).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
