//! Central finite-difference checks of the analytic gradients.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::OracleError;
use crate::alm::{batch_objective, AlmConfig, BatchContext, PenaltyMode, ScoreSpace};
use crate::constraint::{ConstraintState, MulticlassVariant, SampleKey};
use crate::losses::{LossKind, LossSpec};
use crate::netcore::{sigmoid, softmax_rows, Activation, Head, Matrix, Mlp};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Instances with a hinge argument or ReLU pre-activation closer than this to
/// zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// `max |a - n| / max(|a|_inf, |n|_inf)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    diff / scale
}

pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub loss: LossKind,
    /// 1 for a sigmoid head, otherwise the number of classes.
    pub outputs: usize,
    pub penalty: PenaltyMode,
    pub score_space: ScoreSpace,
    pub variant: MulticlassVariant,
}

impl GradCase {
    fn plain(name: &str, loss: LossKind, outputs: usize) -> Self {
        Self {
            name: name.to_string(),
            loss,
            outputs,
            penalty: PenaltyMode::None,
            score_space: ScoreSpace::Probability,
            variant: MulticlassVariant::V1,
        }
    }

    fn with_penalty(mut self, name: &str, penalty: PenaltyMode, space: ScoreSpace, variant: MulticlassVariant) -> Self {
        self.name = name.to_string();
        self.penalty = penalty;
        self.score_space = space;
        self.variant = variant;
        self
    }
}

/// Every loss on the heads it supports, plus the augmented objectives.
pub fn standard_cases() -> Vec<GradCase> {
    let binary_losses = [
        ("bce", LossKind::Bce),
        ("wbce", LossKind::Wbce { w: 3.0 }),
        ("cb_bce", LossKind::CbBce { beta: 0.99 }),
        ("s_fl", LossKind::SFl { gamma: 2.0 }),
        ("a_fl", LossKind::AFl { gamma: 1.0, m: 0.5 }),
        ("s_ml", LossKind::SMl { m: 0.5 }),
        ("a_ml", LossKind::AMl { m: 2.0 }),
        ("ldam", LossKind::Ldam { s: 0.5 }),
        ("mbauc", LossKind::Mbauc { margin: 1.0 }),
    ];
    let multi_losses = [
        ("ce", LossKind::Ce),
        ("cb_ce", LossKind::CbCe { beta: 0.999 }),
        ("s_fl", LossKind::SFl { gamma: 0.5 }),
        ("a_fl", LossKind::AFl { gamma: 2.0, m: 0.5 }),
        ("s_ml", LossKind::SMl { m: 4.0 }),
        ("a_ml", LossKind::AMl { m: 0.5 }),
        ("ldam", LossKind::Ldam { s: 0.3 }),
    ];
    let mut out = Vec::new();
    for (n, k) in binary_losses {
        out.push(GradCase::plain(&format!("binary/{n}"), k, 1));
    }
    for (n, k) in multi_losses {
        out.push(GradCase::plain(&format!("multiclass/{n}"), k, 3));
    }
    let b = GradCase::plain("", LossKind::Bce, 1);
    for (name, mode, space) in [
        ("augmented/binary", PenaltyMode::Alm, ScoreSpace::Probability),
        ("augmented/binary/logit", PenaltyMode::Alm, ScoreSpace::Logit),
        ("augmented/binary/quadratic_only", PenaltyMode::QuadraticOnly, ScoreSpace::Probability),
        ("augmented/binary/lagrangian_only", PenaltyMode::LagrangianOnly, ScoreSpace::Probability),
    ] {
        out.push(b.clone().with_penalty(name, mode, space, MulticlassVariant::V1));
    }
    let c = GradCase::plain("", LossKind::Ce, 3);
    for (name, space, variant) in [
        ("augmented/multiclass/v1", ScoreSpace::Probability, MulticlassVariant::V1),
        ("augmented/multiclass/v2", ScoreSpace::Probability, MulticlassVariant::V2),
        ("augmented/multiclass/v1/logit", ScoreSpace::Logit, MulticlassVariant::V1),
        ("augmented/multiclass/v2/logit", ScoreSpace::Logit, MulticlassVariant::V2),
    ] {
        out.push(c.clone().with_penalty(name, PenaltyMode::Alm, space, variant));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub trials: usize,
    pub redrawn: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

struct Instance {
    model: Mlp,
    x: Matrix,
    labels: Vec<usize>,
    ids: Vec<u64>,
    critical: BTreeSet<usize>,
    loss: LossSpec,
    cfg: AlmConfig,
    state: ConstraintState,
}

const INPUTS: usize = 3;
const BATCH: usize = 9;

fn draw(case: &GradCase, rng: &mut ChaCha8Rng) -> Result<Instance, OracleError> {
    let seed = rng.random();
    let model = Mlp::new(INPUTS, &[6, 5], case.outputs, head_for(case.outputs), seed)?;
    let mut params = model.params();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let mut model = model;
    model.set_params(&params)?;
    let mut x = Matrix::zeros(BATCH, INPUTS);
    for v in x.as_mut_slice() {
        *v = rng.random_range(-2.0..2.0);
    }
    let (labels, critical, counts): (Vec<usize>, BTreeSet<usize>, Vec<usize>) = if case.outputs == 1 {
        let labels = (0..BATCH).map(|i| usize::from(i % 3 == 0)).collect();
        (labels, [1].into(), vec![40, 7])
    } else {
        let labels = (0..BATCH).map(|i| i % case.outputs).collect();
        let mut counts: Vec<usize> = (0..case.outputs).map(|c| 50 >> c).collect();
        counts[0] += 1;
        (labels, [case.outputs - 1].into(), counts)
    };
    let ids: Vec<u64> = (0..BATCH as u64).map(|i| 100 + i).collect();
    let cfg = AlmConfig {
        delta: rng.random_range(0.0..0.5),
        penalty_mode: case.penalty,
        score_space: case.score_space,
        variant: case.variant,
        ..AlmConfig::default()
    };
    let mut state = ConstraintState::new(rng.random_range(0.5..3.0), 2.0, cfg.delta)?;
    for (i, &l) in labels.iter().enumerate() {
        if critical.contains(&l) {
            let key = if case.outputs == 1 {
                SampleKey::binary(ids[i])
            } else {
                SampleKey::critical(ids[i], l)
            };
            state.register([key]);
        }
    }
    let keys: Vec<SampleKey> = state.lambda_map().keys().copied().collect();
    for k in keys {
        let q = crate::constraint::QVector::new(vec![k], vec![rng.random_range(0.0..1.0)])?;
        state.lambda_update(&q)?;
    }
    Ok(Instance {
        model,
        x,
        labels,
        ids,
        critical,
        loss: LossSpec::new(case.loss, counts)?,
        cfg,
        state,
    })
}

fn head_for(outputs: usize) -> Head {
    if outputs == 1 {
        Head::SigmoidScalar
    } else {
        Head::IdentityLogits
    }
}

/// Smallest distance of any piecewise boundary to zero.
fn kink_distance(inst: &Instance) -> Result<f64, OracleError> {
    let mut min: f64 = f64::INFINITY;
    // ReLU pre-activations
    let mut h = inst.x.clone();
    for layer in inst.model.layers() {
        let mut next = Matrix::zeros(h.rows(), layer.out_dim);
        for r in 0..h.rows() {
            for o in 0..layer.out_dim {
                let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let z = layer.bias[o] + w.iter().zip(h.row(r)).map(|(a, b)| a * b).sum::<f64>();
                if layer.activation == Activation::Relu {
                    min = min.min(z.abs());
                }
                next.set(r, o, z);
            }
        }
        if layer.activation == Activation::Relu {
            for v in next.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        h = next;
    }
    let logits = h;
    let delta = inst.cfg.delta;
    let mut pairs = |scores: &dyn Fn(usize, usize) -> f64, pos_rows: &[usize], neg_rows: &[usize], col: usize, margin: f64| {
        for &p in pos_rows {
            for &n in neg_rows {
                min = min.min((scores(n, col) - scores(p, col) + margin).abs());
            }
        }
    };
    let crit: Vec<usize> = (0..BATCH).filter(|&i| inst.critical.contains(&inst.labels[i])).collect();
    let rest: Vec<usize> = (0..BATCH).filter(|&i| !inst.critical.contains(&inst.labels[i])).collect();
    if let LossKind::Mbauc { margin } = inst.loss.kind {
        let s = |r: usize, _c: usize| sigmoid(logits.get(r, 0));
        pairs(&s, &crit, &rest, 0, margin);
    }
    if inst.cfg.penalty_mode != PenaltyMode::None {
        let outputs = if logits.cols() == 1 {
            let mut o = logits.clone();
            if inst.cfg.score_space == ScoreSpace::Probability {
                for v in o.as_mut_slice() {
                    *v = sigmoid(*v);
                }
            }
            o
        } else if inst.cfg.score_space == ScoreSpace::Probability {
            softmax_rows(&logits)
        } else {
            logits.clone()
        };
        let s = |r: usize, c: usize| outputs.get(r, c);
        let cols = outputs.cols();
        let crit_col = if cols == 1 { 0 } else { *inst.critical.iter().next().expect("critical class") };
        pairs(&s, &crit, &rest, crit_col, delta);
        if cols > 1 && inst.cfg.variant == MulticlassVariant::V2 {
            for i in 0..cols {
                if inst.critical.contains(&i) {
                    continue;
                }
                let own: Vec<usize> = rest.iter().copied().filter(|&r| inst.labels[r] == i).collect();
                // max(0, f_i(crit) - f_i(own) + delta)
                let neg = |r: usize, c: usize| -outputs.get(r, c);
                pairs(&neg, &crit, &own, i, delta);
            }
        }
    }
    Ok(min)
}

fn objective(inst: &Instance, model: &Mlp) -> Result<(f64, Matrix), OracleError> {
    let logits = model.logits(&inst.x)?;
    let obj = batch_objective(
        &inst.loss,
        &inst.cfg,
        &inst.state,
        &logits,
        BatchContext {
            labels: &inst.labels,
            ids: &inst.ids,
            critical: &inst.critical,
            num_classes: inst.loss.class_counts.len(),
        },
    )?;
    Ok((obj.value, obj.grad))
}

/// Runs `trials` accepted instances of one case.
pub fn check_case(case: &GradCase, trials: usize, seed: u64) -> Result<GradCheckResult, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    let mut accepted = 0;
    while accepted < trials {
        let inst = draw(case, &mut rng)?;
        if kink_distance(&inst)? < KINK_MARGIN {
            redrawn += 1;
            if redrawn > 50 * trials {
                return Err(OracleError::Check(format!("{}: could not draw kink-free instances", case.name)));
            }
            continue;
        }
        let mut model = inst.model.clone();
        model.forward_cached(&inst.x)?;
        let (_, grad_logits) = objective(&inst, &inst.model)?;
        let analytic = model.backward_logits(&grad_logits)?.flat();
        let theta = inst.model.params();
        let mut probe = inst.model.clone();
        let mut failure = None;
        let numeric = central_difference(
            &mut |p: &[f64]| {
                if let Err(e) = probe.set_params(p) {
                    failure = Some(OracleError::from(e));
                    return f64::NAN;
                }
                match objective(&inst, &probe) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &theta,
            STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
        accepted += 1;
    }
    Ok(GradCheckResult {
        name: case.name.clone(),
        trials,
        redrawn,
        max_relative_error: worst,
        passed: worst <= TOLERANCE,
    })
}

pub fn check_all(trials: usize, seed: u64) -> Result<Vec<GradCheckResult>, OracleError> {
    standard_cases()
        .iter()
        .enumerate()
        .map(|(i, c)| check_case(c, trials, seed.wrapping_add(i as u64)))
        .collect()
}
