//! Baseline classification losses.
//!
//! Every loss consumes pre-head logits: a `B x 1` matrix for binary heads
//! (sigmoid) or `B x C` for multi-class heads (softmax). The returned gradient
//! has the same shape and is taken with respect to those logits. Losses are
//! averaged over the batch.
//!
//! Binary losses are written in signed-margin form `u = s * z` with `s = +1`
//! for the positive label and `-1` otherwise, so cross-entropy, focal and
//! margin variants share one code path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{sigmoid, softplus, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("outputs have {outputs} rows but {labels} labels were given")]
    LengthMismatch { outputs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss `{kind}` is not defined for a {head} head")]
    HeadMismatch { kind: &'static str, head: &'static str },
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
}

/// Loss family and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Ce,
    /// Positive-class term scaled by `w`.
    Wbce { w: f64 },
    CbBce { beta: f64 },
    CbCe { beta: f64 },
    /// Symmetric focal loss.
    SFl { gamma: f64 },
    /// Focal modulation on majority samples only, margin `m` on the minority class.
    AFl {
        gamma: f64,
        #[serde(default)]
        m: f64,
    },
    /// Symmetric margin loss.
    SMl { m: f64 },
    /// Margin on minority samples only.
    AMl { m: f64 },
    /// Label-distribution-aware margin, per-class margin `s / n_c^(1/4)`.
    Ldam { s: f64 },
    /// In-batch squared-hinge AUC surrogate on probabilities.
    Mbauc { margin: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Ce => "ce",
            LossKind::Wbce { .. } => "wbce",
            LossKind::CbBce { .. } => "cb_bce",
            LossKind::CbCe { .. } => "cb_ce",
            LossKind::SFl { .. } => "s_fl",
            LossKind::AFl { .. } => "a_fl",
            LossKind::SMl { .. } => "s_ml",
            LossKind::AMl { .. } => "a_ml",
            LossKind::Ldam { .. } => "ldam",
            LossKind::Mbauc { .. } => "mbauc",
        }
    }

    fn binary_only(&self) -> bool {
        matches!(
            self,
            LossKind::Bce | LossKind::Wbce { .. } | LossKind::CbBce { .. } | LossKind::Mbauc { .. }
        )
    }

    fn multiclass_only(&self) -> bool {
        matches!(self, LossKind::Ce | LossKind::CbCe { .. })
    }

    fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: String| Err(LossError::InvalidParameter(msg));
        match *self {
            LossKind::Wbce { w } if !(w.is_finite() && w > 0.0) => bad(format!("wbce weight must be > 0, got {w}")),
            LossKind::CbBce { beta } | LossKind::CbCe { beta } if !(0.0..1.0).contains(&beta) => {
                bad(format!("class-balanced beta must be in [0, 1), got {beta}"))
            }
            LossKind::SFl { gamma } if !(gamma.is_finite() && gamma >= 0.0) => {
                bad(format!("focal gamma must be >= 0, got {gamma}"))
            }
            LossKind::AFl { gamma, m } if !(gamma.is_finite() && gamma >= 0.0 && m.is_finite() && m >= 0.0) => {
                bad(format!("a_fl needs gamma >= 0 and m >= 0, got gamma={gamma}, m={m}"))
            }
            LossKind::SMl { m } | LossKind::AMl { m } if !(m.is_finite() && m >= 0.0) => {
                bad(format!("margin must be >= 0, got {m}"))
            }
            LossKind::Ldam { s } if !(s.is_finite() && s > 0.0) => bad(format!("ldam scale must be > 0, got {s}")),
            LossKind::Mbauc { margin } if !(margin.is_finite() && margin >= 0.0) => {
                bad(format!("mbauc margin must be >= 0, got {margin}"))
            }
            _ => Ok(()),
        }
    }
}

/// A loss kind plus the training-set class counts it may depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    pub class_counts: Vec<usize>,
}

impl LossSpec {
    pub fn new(kind: LossKind, class_counts: Vec<usize>) -> Result<Self, LossError> {
        let spec = Self { kind, class_counts };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        self.kind.validate()?;
        if self.class_counts.len() < 2 {
            return Err(LossError::InvalidParameter("class_counts needs at least two classes".into()));
        }
        if self.class_counts.contains(&0) {
            return Err(LossError::InvalidParameter("class_counts must be strictly positive".into()));
        }
        Ok(())
    }

    /// Smallest class; ties go to the highest class id so a balanced binary task
    /// treats label 1 as the minority.
    pub fn minority_class(&self) -> usize {
        let mut best = 0;
        for (c, &n) in self.class_counts.iter().enumerate() {
            if n <= self.class_counts[best] {
                best = c;
            }
        }
        best
    }
}

/// Class-balanced weights `(1 - beta) / (1 - beta^n_c)` rescaled to sum to the
/// number of classes.
pub fn class_balanced_weights(beta: f64, class_counts: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| {
            if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powf(n as f64))
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let c = class_counts.len() as f64;
    raw.iter().map(|w| w * c / total).collect()
}

pub fn ldam_margins(s: f64, class_counts: &[usize]) -> Vec<f64> {
    class_counts.iter().map(|&n| s / (n as f64).powf(0.25)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the input logits.
    pub grad: Matrix,
}

/// Per-sample modifiers shared by the cross-entropy family.
#[derive(Debug, Clone, Copy)]
struct Term {
    weight: f64,
    gamma: f64,
    margin: f64,
}

impl Term {
    const PLAIN: Term = Term {
        weight: 1.0,
        gamma: 0.0,
        margin: 0.0,
    };
}

fn term_for(kind: &LossKind, label: usize, minority: usize, cb: &[f64], ldam: &[f64]) -> Term {
    let is_minority = label == minority;
    match *kind {
        LossKind::Bce | LossKind::Ce | LossKind::Mbauc { .. } => Term::PLAIN,
        LossKind::Wbce { w } => Term {
            weight: if label == 1 { w } else { 1.0 },
            ..Term::PLAIN
        },
        LossKind::CbBce { .. } | LossKind::CbCe { .. } => Term {
            weight: cb[label],
            ..Term::PLAIN
        },
        LossKind::SFl { gamma } => Term { gamma, ..Term::PLAIN },
        LossKind::AFl { gamma, m } => {
            if is_minority {
                Term { margin: m, ..Term::PLAIN }
            } else {
                Term { gamma, ..Term::PLAIN }
            }
        }
        LossKind::SMl { m } => Term { margin: m, ..Term::PLAIN },
        LossKind::AMl { m } => {
            if is_minority {
                Term { margin: m, ..Term::PLAIN }
            } else {
                Term::PLAIN
            }
        }
        LossKind::Ldam { .. } => Term {
            margin: ldam[label],
            ..Term::PLAIN
        },
    }
}

/// `-(1 - p)^gamma * ln p` with `p = sigmoid(u)`; returns value and d/du.
fn binary_focal(u: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(u);
    let q = sigmoid(-u);
    let log_p = -softplus(-u);
    if gamma == 0.0 {
        return (-log_p, -q);
    }
    let modulation = q.powf(gamma);
    (-modulation * log_p, modulation * (gamma * p * log_p - q))
}

/// Focal-modulated softmax cross-entropy for one row. `z` is modified in place
/// into the gradient with respect to the (margin-shifted) logits.
fn softmax_focal(z: &mut [f64], label: usize, gamma: f64, margin: f64) -> f64 {
    z[label] -= margin;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_py = z[label] - lse;
    let py = log_py.exp();
    let one_minus = 1.0 - py;
    let (loss, dl_dlogp) = if gamma == 0.0 {
        (-log_py, -1.0)
    } else {
        let modulation = one_minus.powf(gamma);
        let extra = if one_minus > 0.0 {
            gamma * one_minus.powf(gamma - 1.0) * py * log_py
        } else {
            0.0
        };
        (-modulation * log_py, -modulation + extra)
    };
    for (k, v) in z.iter_mut().enumerate() {
        let pk = (*v - lse).exp();
        let indicator = if k == label { 1.0 } else { 0.0 };
        *v = dl_dlogp * (indicator - pk);
    }
    loss
}

/// Mean batch loss and its gradient with respect to the logits.
pub fn loss_and_gradient(spec: &LossSpec, logits: &Matrix, labels: &[usize]) -> Result<LossOutput, LossError> {
    spec.validate()?;
    if logits.rows() != labels.len() {
        return Err(LossError::LengthMismatch {
            outputs: logits.rows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let binary = logits.cols() == 1;
    let classes = if binary { 2 } else { logits.cols() };
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    if spec.class_counts.len() != classes {
        return Err(LossError::InvalidParameter(format!(
            "class_counts has {} entries for {} classes",
            spec.class_counts.len(),
            classes
        )));
    }
    if binary && spec.kind.multiclass_only() {
        return Err(LossError::HeadMismatch {
            kind: spec.kind.name(),
            head: "binary",
        });
    }
    if !binary && spec.kind.binary_only() {
        return Err(LossError::HeadMismatch {
            kind: spec.kind.name(),
            head: "multi-class",
        });
    }

    if let LossKind::Mbauc { margin } = spec.kind {
        let z = logits.as_slice();
        let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let out = mbauc_loss(&probs, labels, margin)?;
        let grad: Vec<f64> = out
            .grad
            .iter()
            .zip(&probs)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        return Ok(LossOutput {
            loss: out.loss,
            grad: Matrix::column(&grad),
        });
    }

    let cb = match spec.kind {
        LossKind::CbBce { beta } | LossKind::CbCe { beta } => class_balanced_weights(beta, &spec.class_counts),
        _ => Vec::new(),
    };
    let ldam = match spec.kind {
        LossKind::Ldam { s } => ldam_margins(s, &spec.class_counts),
        _ => Vec::new(),
    };
    let minority = spec.minority_class();
    let scale = 1.0 / labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let t = term_for(&spec.kind, y, minority, &cb, &ldam);
        if binary {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let u = sign * logits.get(i, 0) - t.margin;
            let (l, dl_du) = binary_focal(u, t.gamma);
            total += t.weight * l;
            grad.set(i, 0, scale * t.weight * sign * dl_du);
        } else {
            let row = grad.row_mut(i);
            row.copy_from_slice(logits.row(i));
            let l = softmax_focal(row, y, t.gamma, t.margin);
            total += t.weight * l;
            for v in row.iter_mut() {
                *v *= scale * t.weight;
            }
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbaucOutput {
    pub loss: f64,
    /// Gradient with respect to the input scores.
    pub grad: Vec<f64>,
    /// True when the batch lacked a positive or a negative.
    pub skipped: bool,
}

/// Mean over positive/negative pairs of `max(0, margin - (f_p - f_n))^2`.
///
/// Runs in `O((P + N) log(P + N))` using sorted scores and prefix sums of
/// `n` and `n^2`. Label 1 is positive.
pub fn mbauc_loss(scores: &[f64], labels: &[usize], margin: f64) -> Result<MbaucOutput, LossError> {
    if scores.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            outputs: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(&label) = labels.iter().find(|&&l| l > 1) {
        return Err(LossError::LabelOutOfRange { label, classes: 2 });
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let mut grad = vec![0.0; scores.len()];
    if pos.is_empty() || neg.is_empty() {
        return Ok(MbaucOutput {
            loss: 0.0,
            grad,
            skipped: true,
        });
    }
    let pairs = (pos.len() * neg.len()) as f64;

    // Negatives ascending with suffix sums: active pairs for positive p are
    // negatives with n > p - margin.
    let mut neg_sorted: Vec<f64> = neg.iter().map(|&i| scores[i]).collect();
    neg_sorted.sort_by(f64::total_cmp);
    let mut suffix = vec![(0.0, 0.0); neg_sorted.len() + 1];
    for k in (0..neg_sorted.len()).rev() {
        let v = neg_sorted[k];
        suffix[k] = (suffix[k + 1].0 + v, suffix[k + 1].1 + v * v);
    }
    let mut total = 0.0;
    for &j in &pos {
        let c = margin - scores[j];
        let start = neg_sorted.partition_point(|&n| n + c <= 0.0);
        let count = (neg_sorted.len() - start) as f64;
        let (s1, s2) = suffix[start];
        // sum (c + n)^2 = count c^2 + 2 c s1 + s2
        total += count * c * c + 2.0 * c * s1 + s2;
        grad[j] = -2.0 * (count * c + s1) / pairs;
    }

    // Positives ascending: active pairs for negative n are positives with p < n + margin.
    let mut pos_sorted: Vec<f64> = pos.iter().map(|&i| scores[i]).collect();
    pos_sorted.sort_by(f64::total_cmp);
    let mut prefix = vec![0.0; pos_sorted.len() + 1];
    for (k, p) in pos_sorted.iter().enumerate() {
        prefix[k + 1] = prefix[k] + (margin - p);
    }
    for &k in &neg {
        let n = scores[k];
        let end = pos_sorted.partition_point(|&p| margin - p + n > 0.0);
        grad[k] = 2.0 * (prefix[end] + end as f64 * n) / pairs;
    }

    Ok(MbaucOutput {
        loss: total / pairs,
        grad,
        skipped: false,
    })
}
