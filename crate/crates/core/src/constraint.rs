//! Pairwise hinge constraint with one multiplier per positive sample.
//!
//! For positive scores `p_j` and negative scores `n_k` the violation of
//! positive `j` is
//!
//! ```text
//! q_j = sum_k max(0, n_k - p_j + delta)
//! ```
//!
//! and the augmented terms added to the base loss are
//!
//! ```text
//! quadratic = mu * sum_j q_j^2 / (2 |p| |n|)
//! linear    =      sum_j lambda_j q_j / (|p| |n|)
//! ```
//!
//! All per-positive sums are computed on sorted scores with prefix sums, so a
//! batch costs `O((P + N) log N)` instead of `O(P N)`. The hinge is treated as
//! inactive at exact equality (`n_k - p_j + delta == 0`), which gives the
//! zero subgradient at the kink.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("penalty needs at least one positive and one negative (got {positives} / {negatives})")]
    EmptyGroup { positives: usize, negatives: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("unknown sample {0:?} in multiplier update")]
    UnknownSample(SampleKey),
    #[error("q values must be >= 0, got {0}")]
    NegativeQ(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid critical class set: {0}")]
    InvalidCriticalSet(String),
    #[error("invalid constraint parameter: {0}")]
    InvalidParameter(String),
}

/// Identifies a multiplier: a training-sample id plus, in multi-class runs,
/// the critical class it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

impl SampleKey {
    pub fn binary(id: u64) -> Self {
        Self { id, class: None }
    }

    pub fn critical(id: u64, class: usize) -> Self {
        Self { id, class: Some(class) }
    }
}

/// Violations for the positives of one batch, keyed by sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QVector {
    pub keys: Vec<SampleKey>,
    pub values: Vec<f64>,
}

impl QVector {
    pub fn new(keys: Vec<SampleKey>, values: Vec<f64>) -> Result<Self, ConstraintError> {
        if keys.len() != values.len() {
            return Err(ConstraintError::LengthMismatch("q keys vs values"));
        }
        Ok(Self { keys, values })
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
}

/// Multipliers and penalty schedule parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintState {
    lambda: BTreeMap<SampleKey, f64>,
    pub mu: f64,
    pub rho: f64,
    pub delta: f64,
}

#[derive(Serialize, Deserialize)]
struct ConstraintStateJson {
    mu: f64,
    rho: f64,
    delta: f64,
    lambda: Vec<LambdaEntry>,
}

#[derive(Serialize, Deserialize)]
struct LambdaEntry {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
    value: f64,
}

impl Serialize for ConstraintState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ConstraintStateJson {
            mu: self.mu,
            rho: self.rho,
            delta: self.delta,
            lambda: self
                .lambda
                .iter()
                .map(|(k, &value)| LambdaEntry {
                    id: k.id,
                    class: k.class,
                    value,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConstraintState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = ConstraintStateJson::deserialize(d)?;
        let mut state = ConstraintState::new(raw.mu, raw.rho, raw.delta).map_err(serde::de::Error::custom)?;
        for e in raw.lambda {
            if !(e.value.is_finite() && e.value >= 0.0) {
                return Err(serde::de::Error::custom(format!("lambda must be >= 0, got {}", e.value)));
            }
            state.lambda.insert(
                SampleKey {
                    id: e.id,
                    class: e.class,
                },
                e.value,
            );
        }
        Ok(state)
    }
}

impl ConstraintState {
    /// `mu >= 0` (zero is allowed so an unconstrained run can be expressed),
    /// `1 < rho <= 4`, `delta >= 0`.
    pub fn new(mu: f64, rho: f64, delta: f64) -> Result<Self, ConstraintError> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(ConstraintError::InvalidParameter(format!("mu must be >= 0, got {mu}")));
        }
        if !(rho > 1.0 && rho <= 4.0) {
            return Err(ConstraintError::InvalidParameter(format!("rho must be in (1, 4], got {rho}")));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(ConstraintError::InvalidParameter(format!("delta must be >= 0, got {delta}")));
        }
        Ok(Self {
            lambda: BTreeMap::new(),
            mu,
            rho,
            delta,
        })
    }

    /// Registers multipliers at zero. Existing entries are kept.
    pub fn register<I: IntoIterator<Item = SampleKey>>(&mut self, keys: I) {
        for k in keys {
            self.lambda.entry(k).or_insert(0.0);
        }
    }

    pub fn lambda(&self, key: &SampleKey) -> f64 {
        self.lambda.get(key).copied().unwrap_or(0.0)
    }

    pub fn lambdas_for(&self, keys: &[SampleKey]) -> Vec<f64> {
        keys.iter().map(|k| self.lambda(k)).collect()
    }

    pub fn lambda_map(&self) -> &BTreeMap<SampleKey, f64> {
        &self.lambda
    }

    pub fn mean_lambda(&self) -> f64 {
        if self.lambda.is_empty() {
            0.0
        } else {
            self.lambda.values().sum::<f64>() / self.lambda.len() as f64
        }
    }

    /// `lambda_j <- lambda_j + mu * q_j` for exactly the samples in `q`.
    /// Validates the whole update before applying any of it.
    pub fn lambda_update(&mut self, q: &QVector) -> Result<(), ConstraintError> {
        for (k, &v) in q.keys.iter().zip(&q.values) {
            if !self.lambda.contains_key(k) {
                return Err(ConstraintError::UnknownSample(*k));
            }
            if v.is_nan() || v < 0.0 {
                return Err(ConstraintError::NegativeQ(v));
            }
        }
        for (k, &v) in q.keys.iter().zip(&q.values) {
            if let Some(l) = self.lambda.get_mut(k) {
                *l += self.mu * v;
            }
        }
        Ok(())
    }
}

/// `q_j = sum_k max(0, n_k - p_j + delta)` for every positive.
pub fn q_values(positives: &[f64], negatives: &[f64], delta: f64) -> Vec<f64> {
    if negatives.is_empty() {
        return vec![0.0; positives.len()];
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut suffix = vec![0.0; sorted.len() + 1];
    for k in (0..sorted.len()).rev() {
        suffix[k] = suffix[k + 1] + sorted[k];
    }
    positives
        .iter()
        .map(|&p| {
            let pivot = p - delta;
            let start = sorted.partition_point(|&n| n - pivot <= 0.0);
            let count = sorted.len() - start;
            if count == 0 {
                0.0
            } else {
                // Sum of differences rather than suffix - count * pivot keeps
                // the result non-negative under rounding.
                (suffix[start] - count as f64 * pivot).max(0.0)
            }
        })
        .collect()
}

/// The two augmented terms for one group of positives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyTerms {
    pub quadratic: f64,
    pub linear: f64,
}

impl PenaltyTerms {
    pub fn total(&self) -> f64 {
        self.quadratic + self.linear
    }
}

impl std::ops::AddAssign for PenaltyTerms {
    fn add_assign(&mut self, rhs: Self) {
        self.quadratic += rhs.quadratic;
        self.linear += rhs.linear;
    }
}

/// `mu * sum q^2 / (2 P N)` and `sum lambda q / (P N)`.
pub fn penalty_terms(
    q: &[f64],
    lambdas: &[f64],
    mu: f64,
    p_count: usize,
    n_count: usize,
) -> Result<PenaltyTerms, ConstraintError> {
    if p_count == 0 || n_count == 0 {
        return Err(ConstraintError::EmptyGroup {
            positives: p_count,
            negatives: n_count,
        });
    }
    if q.len() != lambdas.len() {
        return Err(ConstraintError::LengthMismatch("q vs lambda"));
    }
    let norm = (p_count * n_count) as f64;
    let sq: f64 = q.iter().map(|v| v * v).sum();
    let lin: f64 = q.iter().zip(lambdas).map(|(v, l)| v * l).sum();
    Ok(PenaltyTerms {
        quadratic: mu * sq / (2.0 * norm),
        linear: lin / norm,
    })
}

/// Gradient of `sum_j w_j * sum_k max(0, n_k - p_j + delta)` with respect to
/// every positive and negative score.
pub fn weighted_hinge_gradient(
    positives: &[f64],
    negatives: &[f64],
    weights: &[f64],
    delta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut gp = vec![0.0; positives.len()];
    let mut gn = vec![0.0; negatives.len()];
    if positives.is_empty() || negatives.is_empty() {
        return (gp, gn);
    }
    let mut neg_sorted = negatives.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    for (j, &p) in positives.iter().enumerate() {
        let pivot = p - delta;
        let start = neg_sorted.partition_point(|&n| n - pivot <= 0.0);
        gp[j] = -weights[j] * (neg_sorted.len() - start) as f64;
    }
    // Negative k is active against positive j when p_j < n_k + delta.
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.sort_by(|&a, &b| positives[a].total_cmp(&positives[b]));
    let sorted_p: Vec<f64> = order.iter().map(|&j| positives[j]).collect();
    let mut prefix = vec![0.0; order.len() + 1];
    for (i, &j) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + weights[j];
    }
    for (k, &n) in negatives.iter().enumerate() {
        let end = sorted_p.partition_point(|&p| n - (p - delta) > 0.0);
        gn[k] = prefix[end];
    }
    (gp, gn)
}

/// Gradient of `quadratic + linear` with respect to the scores.
///
/// `d/dp_j = -(mu q_j + lambda_j) V_j / (P N)` with `V_j` the number of
/// negatives violating against `j`; `d/dn_k` sums `(mu q_j + lambda_j) / (P N)`
/// over the positives it violates against.
pub fn penalty_gradient(
    positives: &[f64],
    negatives: &[f64],
    lambdas: &[f64],
    mu: f64,
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>), ConstraintError> {
    if lambdas.len() != positives.len() {
        return Err(ConstraintError::LengthMismatch("lambda vs positives"));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Ok((vec![0.0; positives.len()], vec![0.0; negatives.len()]));
    }
    let q = q_values(positives, negatives, delta);
    let norm = (positives.len() * negatives.len()) as f64;
    let weights: Vec<f64> = q.iter().zip(lambdas).map(|(qj, lj)| (mu * qj + lj) / norm).collect();
    Ok(weighted_hinge_gradient(positives, negatives, &weights, delta))
}

/// Which multi-class constraint to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MulticlassVariant {
    /// Critical-class output must rank critical samples above all non-critical samples.
    #[default]
    V1,
    /// V1 plus: each non-critical class output must rank its own samples above critical samples.
    V2,
}

/// Violations for one critical class within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassQ {
    pub class: usize,
    /// Batch row indices of the critical samples, aligned with `q`.
    pub rows: Vec<usize>,
    pub q: Vec<f64>,
    /// Number of non-critical samples in the batch.
    pub negatives: usize,
}

fn partition_rows(
    labels: &[usize],
    classes: usize,
    critical: &BTreeSet<usize>,
) -> Result<Vec<usize>, ConstraintError> {
    if critical.is_empty() {
        return Err(ConstraintError::InvalidCriticalSet("no critical class".into()));
    }
    if let Some(&c) = critical.iter().find(|&&c| c >= classes) {
        return Err(ConstraintError::InvalidCriticalSet(format!(
            "critical class {c} out of range for {classes} classes"
        )));
    }
    if critical.len() >= classes {
        return Err(ConstraintError::InvalidCriticalSet(
            "every class is critical; the non-critical family is empty".into(),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ConstraintError::LabelOutOfRange { label, classes });
    }
    Ok((0..labels.len()).filter(|&i| !critical.contains(&labels[i])).collect())
}

/// Per-critical-class violations (first form, and optionally the second hinge family).
pub fn multiclass_q(
    outputs: &Matrix,
    labels: &[usize],
    critical: &BTreeSet<usize>,
    delta: f64,
    variant: MulticlassVariant,
) -> Result<Vec<ClassQ>, ConstraintError> {
    if outputs.rows() != labels.len() {
        return Err(ConstraintError::LengthMismatch("outputs vs labels"));
    }
    let classes = outputs.cols();
    let neg_rows = partition_rows(labels, classes, critical)?;
    let mut out = Vec::with_capacity(critical.len());
    for &c in critical {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let pos: Vec<f64> = rows.iter().map(|&r| outputs.get(r, c)).collect();
        let neg: Vec<f64> = neg_rows.iter().map(|&r| outputs.get(r, c)).collect();
        let mut q = q_values(&pos, &neg, delta);
        if variant == MulticlassVariant::V2 {
            for i in 0..classes {
                if critical.contains(&i) {
                    continue;
                }
                // max(0, a_j - b_k + delta) with a = class-i output on critical
                // samples, b = class-i output on class-i samples; negate both to
                // reuse the q_values orientation.
                let a: Vec<f64> = rows.iter().map(|&r| -outputs.get(r, i)).collect();
                let b: Vec<f64> = neg_rows
                    .iter()
                    .filter(|&&r| labels[r] == i)
                    .map(|&r| -outputs.get(r, i))
                    .collect();
                for (qj, extra) in q.iter_mut().zip(q_values(&a, &b, delta)) {
                    *qj += extra;
                }
            }
        }
        out.push(ClassQ {
            class: c,
            rows,
            q,
            negatives: neg_rows.len(),
        });
    }
    Ok(out)
}

pub fn multiclass_q_v1(
    outputs: &Matrix,
    labels: &[usize],
    critical: &BTreeSet<usize>,
    delta: f64,
) -> Result<Vec<ClassQ>, ConstraintError> {
    multiclass_q(outputs, labels, critical, delta, MulticlassVariant::V1)
}

pub fn multiclass_q_v2(
    outputs: &Matrix,
    labels: &[usize],
    critical: &BTreeSet<usize>,
    delta: f64,
) -> Result<Vec<ClassQ>, ConstraintError> {
    multiclass_q(outputs, labels, critical, delta, MulticlassVariant::V2)
}

/// Penalty value and gradient for the multi-class constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassPenalty {
    pub terms: PenaltyTerms,
    /// Gradient with respect to `outputs`.
    pub grad: Matrix,
    pub per_class: Vec<ClassQ>,
}

/// Evaluates the multi-class penalty, normalizing class `c` by
/// `|p^c| * sum_i |n^i|` within the batch. Classes with no critical sample or
/// an empty non-critical family contribute nothing.
///
/// `lambdas` maps a critical class to multipliers aligned with that class's
/// critical rows (as returned by [`multiclass_q`] in the same order).
pub fn multiclass_penalty(
    outputs: &Matrix,
    labels: &[usize],
    critical: &BTreeSet<usize>,
    delta: f64,
    variant: MulticlassVariant,
    mu: f64,
    lambdas: &dyn Fn(usize, &[usize]) -> Vec<f64>,
) -> Result<MulticlassPenalty, ConstraintError> {
    let per_class = multiclass_q(outputs, labels, critical, delta, variant)?;
    let classes = outputs.cols();
    let neg_rows: Vec<usize> = (0..labels.len()).filter(|&i| !critical.contains(&labels[i])).collect();
    let mut grad = Matrix::zeros(outputs.rows(), classes);
    let mut terms = PenaltyTerms::default();
    for cq in &per_class {
        if cq.rows.is_empty() || cq.negatives == 0 {
            continue;
        }
        let lam = lambdas(cq.class, &cq.rows);
        if lam.len() != cq.rows.len() {
            return Err(ConstraintError::LengthMismatch("lambda vs critical rows"));
        }
        terms += penalty_terms(&cq.q, &lam, mu, cq.rows.len(), cq.negatives)?;
        let norm = (cq.rows.len() * cq.negatives) as f64;
        let w: Vec<f64> = cq.q.iter().zip(&lam).map(|(q, l)| (mu * q + l) / norm).collect();

        let c = cq.class;
        let pos: Vec<f64> = cq.rows.iter().map(|&r| outputs.get(r, c)).collect();
        let neg: Vec<f64> = neg_rows.iter().map(|&r| outputs.get(r, c)).collect();
        let (gp, gn) = weighted_hinge_gradient(&pos, &neg, &w, delta);
        for (&r, g) in cq.rows.iter().zip(gp) {
            grad.set(r, c, grad.get(r, c) + g);
        }
        for (&r, g) in neg_rows.iter().zip(gn) {
            grad.set(r, c, grad.get(r, c) + g);
        }

        if variant == MulticlassVariant::V2 {
            for i in 0..classes {
                if critical.contains(&i) {
                    continue;
                }
                let own: Vec<usize> = neg_rows.iter().copied().filter(|&r| labels[r] == i).collect();
                let a: Vec<f64> = cq.rows.iter().map(|&r| -outputs.get(r, i)).collect();
                let b: Vec<f64> = own.iter().map(|&r| -outputs.get(r, i)).collect();
                let (ga, gb) = weighted_hinge_gradient(&a, &b, &w, delta);
                // chain through the negation
                for (&r, g) in cq.rows.iter().zip(ga) {
                    grad.set(r, i, grad.get(r, i) - g);
                }
                for (&r, g) in own.iter().zip(gb) {
                    grad.set(r, i, grad.get(r, i) - g);
                }
            }
        }
    }
    Ok(MulticlassPenalty { terms, grad, per_class })
}

/// The same hinge terms grouped three ways: one constraint per positive, one
/// per negative, and one per pair (pairs enumerated positive-major).
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPenalties {
    pub per_positive: Vec<f64>,
    pub per_negative: Vec<f64>,
    pub per_pair: Vec<f64>,
}

impl VariantPenalties {
    /// Augmented cost of one grouping with a shared multiplier `lambda`,
    /// normalized by `P N` as in the per-positive form.
    pub fn cost(group: &[f64], mu: f64, lambda: f64, p_count: usize, n_count: usize) -> f64 {
        let norm = (p_count * n_count) as f64;
        let sq: f64 = group.iter().map(|v| v * v).sum();
        let lin: f64 = group.iter().sum();
        mu * sq / (2.0 * norm) + lambda * lin / norm
    }
}

pub fn variant_penalties(positives: &[f64], negatives: &[f64], delta: f64) -> VariantPenalties {
    let per_positive = q_values(positives, negatives, delta);
    // Per-negative: r_k = sum_j max(0, n_k - p_j + delta), i.e. q_values with
    // the roles mirrored through negation.
    let neg_mirror: Vec<f64> = negatives.iter().map(|v| -v).collect();
    let pos_mirror: Vec<f64> = positives.iter().map(|v| -v).collect();
    let per_negative = q_values(&neg_mirror, &pos_mirror, delta);
    let per_pair = positives
        .iter()
        .flat_map(|&p| negatives.iter().map(move |&n| (n - p + delta).max(0.0)))
        .collect();
    VariantPenalties {
        per_positive,
        per_negative,
        per_pair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_q(p: &[f64], n: &[f64], delta: f64) -> Vec<f64> {
        p.iter()
            .map(|&pj| n.iter().map(|&nk| (nk - pj + delta).max(0.0)).sum())
            .collect()
    }

    #[test]
    fn q_examples() {
        assert_eq!(q_values(&[0.9], &[0.1, 0.2], 0.0), vec![0.0]);
        let q = q_values(&[0.3], &[0.5, 0.8], 0.1);
        assert!((q[0] - 0.9).abs() < 1e-15);
        assert!(q_values(&[], &[0.1], 0.1).is_empty());
        assert_eq!(q_values(&[0.2], &[], 0.1), vec![0.0]);
    }

    #[test]
    fn kink_is_inactive() {
        // n - p + delta == 0 exactly
        assert_eq!(q_values(&[0.5], &[0.25], 0.25), vec![0.0]);
        let (gp, gn) = penalty_gradient(&[0.5], &[0.25], &[1.0], 1.0, 0.25).unwrap();
        assert_eq!((gp[0], gn[0]), (0.0, 0.0));
    }

    #[test]
    fn penalty_term_examples() {
        let zero = penalty_terms(&[0.0, 0.0], &[0.3, 0.1], 2.0, 2, 3).unwrap();
        assert_eq!(zero, PenaltyTerms::default());
        let t = penalty_terms(&[2.0], &[0.5], 0.1, 1, 4).unwrap();
        assert!((t.quadratic - 0.05).abs() < 1e-15);
        assert!((t.linear - 0.25).abs() < 1e-15);
        assert!(matches!(
            penalty_terms(&[], &[], 1.0, 0, 3),
            Err(ConstraintError::EmptyGroup { .. })
        ));
    }

    #[test]
    fn gradient_examples() {
        let (gp, gn) = penalty_gradient(&[0.9, 0.8], &[0.1, 0.2], &[1.0, 1.0], 1.0, 0.1).unwrap();
        assert!(gp.iter().chain(&gn).all(|&g| g == 0.0));
        // one violating pair, lambda = 0
        let (mu, p, n) = (0.7, 0.2, 0.5);
        let (gp, gn) = penalty_gradient(&[p], &[n], &[0.0], mu, 0.0).unwrap();
        let q = n - p;
        assert!((gp[0] + mu * q).abs() < 1e-15);
        assert!((gn[0] - mu * q).abs() < 1e-15);
    }

    #[test]
    fn multiclass_v1_example() {
        // sample 0 critical (class 0) with output 0.2; samples 1, 2 from classes 1 and 2
        let out = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.3, 0.3], vec![0.1, 0.1, 0.8]]).unwrap();
        let crit: BTreeSet<usize> = [0].into();
        let q = multiclass_q_v1(&out, &[0, 1, 2], &crit, 0.05).unwrap();
        assert_eq!(q.len(), 1);
        assert!((q[0].q[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn multiclass_errors() {
        let out = Matrix::zeros(2, 3);
        let empty = BTreeSet::new();
        assert!(multiclass_q_v1(&out, &[0, 1], &empty, 0.1).is_err());
        let crit: BTreeSet<usize> = [0].into();
        assert!(matches!(
            multiclass_q_v1(&out, &[0, 3], &crit, 0.1),
            Err(ConstraintError::LabelOutOfRange { .. })
        ));
        let all: BTreeSet<usize> = [0, 1, 2].into();
        assert!(multiclass_q_v1(&out, &[0, 1], &all, 0.1).is_err());
    }

    #[test]
    fn lambda_update_semantics() {
        let mut s = ConstraintState::new(1e-3, 2.0, 0.1).unwrap();
        s.register([SampleKey::binary(1), SampleKey::binary(2)]);
        s.lambda_update(&QVector::new(vec![SampleKey::binary(1)], vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(s.lambda(&SampleKey::binary(1)), 0.002);
        assert_eq!(s.lambda(&SampleKey::binary(2)), 0.0);
        let err = s
            .lambda_update(&QVector::new(vec![SampleKey::binary(9)], vec![1.0]).unwrap())
            .unwrap_err();
        assert_eq!(err, ConstraintError::UnknownSample(SampleKey::binary(9)));
        assert!(s
            .lambda_update(&QVector::new(vec![SampleKey::binary(1)], vec![-1.0]).unwrap())
            .is_err());
    }

    #[test]
    fn state_json_round_trip() {
        let mut s = ConstraintState::new(2e-5, 3.0, 0.25).unwrap();
        s.register([SampleKey::binary(4), SampleKey::critical(7, 2)]);
        s.lambda_update(&QVector::new(vec![SampleKey::critical(7, 2)], vec![0.3]).unwrap())
            .unwrap();
        let j = serde_json::to_string(&s).unwrap();
        let back: ConstraintState = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        assert!(ConstraintState::new(1.0, 5.0, 0.1).is_err());
        assert!(ConstraintState::new(1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn variant_groupings_share_hinge_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random::<f64>()).collect();
            let n: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random::<f64>()).collect();
            let v = variant_penalties(&p, &n, 0.1);
            let a: f64 = v.per_positive.iter().sum();
            let b: f64 = v.per_negative.iter().sum();
            let c: f64 = v.per_pair.iter().sum();
            assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
        let sep = variant_penalties(&[0.9, 0.95], &[0.1, 0.2], 0.1);
        assert!(sep
            .per_positive
            .iter()
            .chain(&sep.per_negative)
            .chain(&sep.per_pair)
            .all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn fast_q_matches_brute(
            p in prop::collection::vec(-2.0f64..2.0, 0..64),
            n in prop::collection::vec(-2.0f64..2.0, 0..64),
            delta in 0.0f64..1.0,
        ) {
            let fast = q_values(&p, &n, delta);
            let slow = brute_q(&p, &n, delta);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn shift_invariance(
            p in prop::collection::vec(0.0f64..1.0, 1..32),
            n in prop::collection::vec(0.0f64..1.0, 1..32),
            shift in -0.5f64..0.5,
        ) {
            let a = q_values(&p, &n, 0.1);
            let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let ns: Vec<f64> = n.iter().map(|v| v + shift).collect();
            let b = q_values(&ps, &ns, 0.1);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn permutation_invariance(
            p in prop::collection::vec(0.0f64..1.0, 1..32),
            n in prop::collection::vec(0.0f64..1.0, 1..32),
        ) {
            let lam: Vec<f64> = (0..p.len()).map(|i| i as f64 * 0.1).collect();
            let q = q_values(&p, &n, 0.2);
            let t = penalty_terms(&q, &lam, 0.5, p.len(), n.len()).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.reverse();
            let pr: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let lr: Vec<f64> = idx.iter().map(|&i| lam[i]).collect();
            let mut nr = n.clone();
            nr.reverse();
            let qr = q_values(&pr, &nr, 0.2);
            let tr = penalty_terms(&qr, &lr, 0.5, p.len(), n.len()).unwrap();
            prop_assert!((t.total() - tr.total()).abs() <= 1e-12);
        }
    }
}
