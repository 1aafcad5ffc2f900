//! The training loop: descent on the loss plus constraint penalty, per-batch
//! multiplier ascent, and a validation-driven penalty schedule.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{
    multiclass_penalty, penalty_gradient, penalty_terms, q_values, ConstraintError, ConstraintState,
    MulticlassVariant, PenaltyTerms, QVector, SampleKey,
};
use crate::data::Dataset;
use crate::losses::{loss_and_gradient, LossError, LossSpec};
use crate::metrics::{accuracy, auc_mann_whitney, binary_accuracy, MetricsError};
use crate::netcore::{sigmoid, softmax_rows, Matrix, Mlp, NetError, Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum AlmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite objective")]
    Diverged {
        epoch: usize,
        batch: usize,
        trace: Box<TrainingTrace>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    #[default]
    Auc,
    Accuracy,
}

/// Which parts of the augmented objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    #[default]
    Alm,
    /// `mu sum q^2` only; multipliers stay at zero.
    QuadraticOnly,
    /// `sum lambda q` only; multipliers are still updated.
    LagrangianOnly,
    None,
}

impl PenaltyMode {
    fn uses_quadratic(self) -> bool {
        matches!(self, PenaltyMode::Alm | PenaltyMode::QuadraticOnly)
    }

    fn uses_linear(self) -> bool {
        matches!(self, PenaltyMode::Alm | PenaltyMode::LagrangianOnly)
    }
}

/// Scores the constraint is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// Sigmoid output (binary) or softmax probabilities (multi-class).
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Stratified when the class ratio is at least 1:50, shuffled otherwise.
    #[default]
    Auto,
    Shuffle,
    /// Every batch holds at least one critical sample.
    Stratified,
}

/// Class ratio from which [`Sampling::Auto`] switches to stratified batches.
pub const STRATIFY_RATIO: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlmConfig {
    pub mu0: f64,
    pub rho: f64,
    pub delta: f64,
    pub val_metric: ValMetric,
    pub val_tolerance: f64,
    pub penalty_mode: PenaltyMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub score_space: ScoreSpace,
    pub sampling: Sampling,
    pub variant: MulticlassVariant,
    /// `None` disables early stopping; the last epoch's model is returned.
    pub patience: Option<usize>,
}

impl Default for AlmConfig {
    fn default() -> Self {
        Self {
            mu0: 1e-5,
            rho: 2.0,
            delta: 0.25,
            val_metric: ValMetric::Auc,
            val_tolerance: 1e-4,
            penalty_mode: PenaltyMode::Alm,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            score_space: ScoreSpace::Probability,
            sampling: Sampling::Auto,
            variant: MulticlassVariant::V1,
            patience: Some(20),
        }
    }
}

impl AlmConfig {
    /// Same run with the constraint switched off.
    pub fn baseline(&self) -> Self {
        Self {
            penalty_mode: PenaltyMode::None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), AlmError> {
        let bad = |m: String| Err(AlmError::InvalidConfig(m));
        if !(self.mu0.is_finite() && self.mu0 >= 0.0) {
            return bad(format!("mu0 must be >= 0, got {}", self.mu0));
        }
        if !(self.rho > 1.0 && self.rho <= 4.0) {
            return bad(format!("rho must be in (1, 4], got {}", self.rho));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.val_tolerance.is_finite() && self.val_tolerance >= 0.0) {
            return bad(format!("val_tolerance must be >= 0, got {}", self.val_tolerance));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be >= 1".into());
        }
        Ok(())
    }
}

/// `mu * rho` iff `current < previous - tolerance`.
pub fn mu_update(mu: f64, rho: f64, current: f64, previous: f64, tolerance: f64) -> f64 {
    if current < previous - tolerance {
        mu * rho
    } else {
        mu
    }
}

/// Applies `lambda_j += mu q_j` for the samples in `q`.
pub fn lambda_update(state: &mut ConstraintState, q: &QVector) -> Result<(), ConstraintError> {
    state.lambda_update(q)
}

/// Objective value for a penalty mode given the plain loss and the penalty terms.
pub fn ablation_loss(mode: PenaltyMode, loss: f64, terms: &PenaltyTerms) -> f64 {
    match mode {
        PenaltyMode::Alm => loss + terms.quadratic + terms.linear,
        PenaltyMode::QuadraticOnly => loss + terms.quadratic,
        PenaltyMode::LagrangianOnly => loss + terms.linear,
        PenaltyMode::None => loss,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_metric: f64,
    pub mu: f64,
    pub mean_q: f64,
    pub max_q: f64,
    pub mean_lambda: f64,
    pub loss_f: f64,
    pub loss_quad: f64,
    pub loss_lin: f64,
}

/// q values observed in one batch, with the mu in force for that batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub mu: f64,
    pub keys: Vec<SampleKey>,
    pub q: Vec<f64>,
    /// Whether the multipliers were updated from this batch.
    pub lambda_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Validation metric of the untrained model.
    pub initial_val_metric: f64,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    /// Epoch whose parameters were returned (0 = untrained).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "val_metric",
            "mu",
            "mean_q",
            "max_q",
            "mean_lambda",
            "loss_F",
            "loss_quad",
            "loss_lin",
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.val_metric.to_string(),
                e.mu.to_string(),
                e.mean_q.to_string(),
                e.max_q.to_string(),
                e.mean_lambda.to_string(),
                e.loss_f.to_string(),
                e.loss_quad.to_string(),
                e.loss_lin.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn mu_sequence(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mu).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub state: ConstraintState,
    pub trace: TrainingTrace,
}

/// Per-batch objective: value, gradient with respect to the logits and the
/// q values that feed the multiplier update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub value: f64,
    pub loss: f64,
    pub terms: PenaltyTerms,
    pub grad: Matrix,
    pub q: QVector,
}

/// Everything the objective needs to know about a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext<'a> {
    pub labels: &'a [usize],
    pub ids: &'a [u64],
    pub critical: &'a BTreeSet<usize>,
    pub num_classes: usize,
}

/// Evaluates `F + penalty` on a batch of logits.
///
/// Binary models (one output column) treat samples whose label is in the
/// critical set as positives. Batches without a positive or without a negative
/// carry no penalty.
pub fn batch_objective(
    loss: &LossSpec,
    cfg: &AlmConfig,
    state: &ConstraintState,
    logits: &Matrix,
    ctx: BatchContext<'_>,
) -> Result<BatchObjective, AlmError> {
    let binary = logits.cols() == 1;
    let loss_labels: Vec<usize> = if binary {
        ctx.labels.iter().map(|l| usize::from(ctx.critical.contains(l))).collect()
    } else {
        ctx.labels.to_vec()
    };
    let plain = loss_and_gradient(loss, logits, &loss_labels)?;
    let mut grad = plain.grad;
    let mode = cfg.penalty_mode;
    let mu_eff = if mode.uses_quadratic() { state.mu } else { 0.0 };
    let use_lambda = mode.uses_linear();

    let (terms, q) = if binary {
        binary_penalty(cfg, state, logits, &loss_labels, ctx.ids, mu_eff, use_lambda, &mut grad)?
    } else {
        multiclass_penalty_term(cfg, state, logits, ctx, mu_eff, use_lambda, &mut grad)?
    };
    let value = ablation_loss(mode, plain.loss, &terms);
    Ok(BatchObjective {
        value,
        loss: plain.loss,
        terms,
        grad,
        q,
    })
}

#[allow(clippy::too_many_arguments)]
fn binary_penalty(
    cfg: &AlmConfig,
    state: &ConstraintState,
    logits: &Matrix,
    labels01: &[usize],
    ids: &[u64],
    mu_eff: f64,
    use_lambda: bool,
    grad: &mut Matrix,
) -> Result<(PenaltyTerms, QVector), AlmError> {
    let z = logits.as_slice();
    let scores: Vec<f64> = match cfg.score_space {
        ScoreSpace::Probability => z.iter().map(|&v| sigmoid(v)).collect(),
        ScoreSpace::Logit => z.to_vec(),
    };
    let pos_rows: Vec<usize> = (0..z.len()).filter(|&i| labels01[i] == 1).collect();
    let neg_rows: Vec<usize> = (0..z.len()).filter(|&i| labels01[i] == 0).collect();
    let keys: Vec<SampleKey> = pos_rows.iter().map(|&i| SampleKey::binary(ids[i])).collect();
    if pos_rows.is_empty() || neg_rows.is_empty() {
        return Ok((PenaltyTerms::default(), QVector::new(Vec::new(), Vec::new())?));
    }
    let pos: Vec<f64> = pos_rows.iter().map(|&i| scores[i]).collect();
    let neg: Vec<f64> = neg_rows.iter().map(|&i| scores[i]).collect();
    let q = q_values(&pos, &neg, cfg.delta);
    let lambdas = if use_lambda {
        state.lambdas_for(&keys)
    } else {
        vec![0.0; keys.len()]
    };
    let terms = penalty_terms(&q, &lambdas, state.mu, pos.len(), neg.len())?;
    if cfg.penalty_mode == PenaltyMode::None {
        return Ok((terms, QVector::new(keys, q)?));
    }
    let (gp, gn) = penalty_gradient(&pos, &neg, &lambdas, mu_eff, cfg.delta)?;
    let slope = |i: usize| match cfg.score_space {
        ScoreSpace::Probability => scores[i] * (1.0 - scores[i]),
        ScoreSpace::Logit => 1.0,
    };
    let g = grad.as_mut_slice();
    for (&r, d) in pos_rows.iter().zip(gp) {
        g[r] += d * slope(r);
    }
    for (&r, d) in neg_rows.iter().zip(gn) {
        g[r] += d * slope(r);
    }
    Ok((terms, QVector::new(keys, q)?))
}

fn multiclass_penalty_term(
    cfg: &AlmConfig,
    state: &ConstraintState,
    logits: &Matrix,
    ctx: BatchContext<'_>,
    mu_eff: f64,
    use_lambda: bool,
    grad: &mut Matrix,
) -> Result<(PenaltyTerms, QVector), AlmError> {
    let outputs = match cfg.score_space {
        ScoreSpace::Probability => softmax_rows(logits),
        ScoreSpace::Logit => logits.clone(),
    };
    let lambdas = |class: usize, rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .map(|&r| {
                if use_lambda {
                    state.lambda(&SampleKey::critical(ctx.ids[r], class))
                } else {
                    0.0
                }
            })
            .collect()
    };
    let pen = multiclass_penalty(
        &outputs,
        ctx.labels,
        ctx.critical,
        cfg.delta,
        cfg.variant,
        mu_eff,
        &lambdas,
    )?;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut terms = PenaltyTerms::default();
    for cq in &pen.per_class {
        if cq.rows.is_empty() || cq.negatives == 0 {
            continue;
        }
        // The reported terms always use the real mu; the gradient used mu_eff.
        let lam = lambdas(cq.class, &cq.rows);
        terms += penalty_terms(&cq.q, &lam, state.mu, cq.rows.len(), cq.negatives)?;
        keys.extend(cq.rows.iter().map(|&r| SampleKey::critical(ctx.ids[r], cq.class)));
        values.extend_from_slice(&cq.q);
    }
    if cfg.penalty_mode != PenaltyMode::None {
        let dp = &pen.grad;
        for r in 0..logits.rows() {
            let gz = grad.row_mut(r);
            match cfg.score_space {
                ScoreSpace::Probability => {
                    let p = outputs.row(r);
                    let dot: f64 = dp.row(r).iter().zip(p).map(|(a, b)| a * b).sum();
                    for c in 0..p.len() {
                        gz[c] += p[c] * (dp.get(r, c) - dot);
                    }
                }
                ScoreSpace::Logit => {
                    for (g, d) in gz.iter_mut().zip(dp.row(r)) {
                        *g += d;
                    }
                }
            }
        }
    }
    Ok((terms, QVector::new(keys, values)?))
}

/// Validation metric of `model` on `data` (AUC on the critical score, or accuracy).
pub fn validation_metric(model: &Mlp, data: &Dataset, metric: ValMetric) -> Result<f64, AlmError> {
    let logits = model.logits(&data.features())?;
    let labels = data.labels();
    let critical = data.critical_classes();
    if logits.cols() == 1 {
        let is_pos: Vec<bool> = labels.iter().map(|l| critical.contains(l)).collect();
        match metric {
            ValMetric::Auc => {
                let (pos, neg) = split_scores(logits.as_slice(), &is_pos);
                Ok(auc_mann_whitney(&pos, &neg)?)
            }
            ValMetric::Accuracy => {
                let probs: Vec<f64> = logits.as_slice().iter().map(|&z| sigmoid(z)).collect();
                Ok(binary_accuracy(&probs, &is_pos)?)
            }
        }
    } else {
        match metric {
            ValMetric::Accuracy => Ok(accuracy(&logits, &labels)?),
            ValMetric::Auc => {
                // one-vs-rest AUC of the first critical class
                let c = *critical.iter().next().expect("critical set is non-empty");
                let is_pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                let (pos, neg) = split_scores(&logits.col_values(c), &is_pos);
                Ok(auc_mann_whitney(&pos, &neg)?)
            }
        }
    }
}

fn split_scores(scores: &[f64], is_pos: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &p) in scores.iter().zip(is_pos) {
        if p {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}

fn check_dataset(model: &Mlp, data: &Dataset) -> Result<(), AlmError> {
    if model.input_dim() != data.feature_dim() {
        return Err(AlmError::Degenerate(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            data.feature_dim()
        )));
    }
    let counts = data.class_counts();
    let critical = data.critical_classes();
    let negatives: usize = (0..counts.len()).filter(|c| !critical.contains(c)).map(|c| counts[c]).sum();
    if negatives == 0 {
        return Err(AlmError::Degenerate("no non-critical training samples".into()));
    }
    for &c in critical {
        if counts[c] == 0 {
            return Err(AlmError::Degenerate(format!("critical class {c} has no training samples")));
        }
    }
    if model.output_dim() == 1 {
        if data.num_classes() != 2 {
            return Err(AlmError::Degenerate(format!(
                "a single-output model needs a binary dataset, got {} classes",
                data.num_classes()
            )));
        }
    } else if model.output_dim() != data.num_classes() {
        return Err(AlmError::Degenerate(format!(
            "model has {} outputs for {} classes",
            model.output_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Batch row indices for one epoch.
pub fn make_batches(data: &Dataset, batch_size: usize, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = data.len();
    let critical = data.critical_classes();
    let stratified = match sampling {
        Sampling::Shuffle => false,
        Sampling::Stratified => true,
        Sampling::Auto => {
            let counts = data.class_counts();
            let max = *counts.iter().max().unwrap_or(&0) as f64;
            let min = *counts.iter().min().unwrap_or(&0) as f64;
            min > 0.0 && max / min >= STRATIFY_RATIO
        }
    };
    let n_batches = n.div_ceil(batch_size).max(1);
    if !stratified || n_batches == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in data.samples().iter().enumerate() {
        if critical.contains(&s.label) {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut batches = vec![Vec::new(); n_batches];
    // Deal positives round-robin, cycling if there are fewer than batches.
    let dealt = pos.len().max(n_batches);
    for i in 0..dealt {
        if !pos.is_empty() {
            batches[i % n_batches].push(pos[i % pos.len()]);
        }
    }
    for (i, &r) in neg.iter().enumerate() {
        batches[i * n_batches / neg.len().max(1)].push(r);
    }
    batches.retain(|b| !b.is_empty());
    batches
}

/// Trains with the validation metric computed on `validation`.
pub fn train(
    model: Mlp,
    train_set: &Dataset,
    validation: &Dataset,
    loss: &LossSpec,
    cfg: &AlmConfig,
) -> Result<TrainOutcome, AlmError> {
    let metric = cfg.val_metric;
    train_with_monitor(model, train_set, loss, cfg, &mut |m: &Mlp, _epoch: usize| {
        validation_metric(m, validation, metric)
    })
}

/// Trains with an arbitrary per-epoch validation callback (called with the
/// model and the epoch number, 0 for the untrained model).
pub fn train_with_monitor(
    mut model: Mlp,
    train_set: &Dataset,
    loss: &LossSpec,
    cfg: &AlmConfig,
    monitor: &mut dyn FnMut(&Mlp, usize) -> Result<f64, AlmError>,
) -> Result<TrainOutcome, AlmError> {
    cfg.validate()?;
    loss.validate()?;
    check_dataset(&model, train_set)?;

    let mut state = ConstraintState::new(cfg.mu0, cfg.rho, cfg.delta)?;
    let binary = model.output_dim() == 1;
    let critical = train_set.critical_classes().clone();
    for s in train_set.samples() {
        if critical.contains(&s.label) {
            state.register([if binary {
                SampleKey::binary(s.id)
            } else {
                SampleKey::critical(s.id, s.label)
            }]);
        }
    }

    let features = train_set.features();
    let labels = train_set.labels();
    let ids = train_set.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut trace = TrainingTrace::default();

    let initial = monitor(&model, 0)?;
    trace.initial_val_metric = initial;
    let mut previous = initial;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train_set, cfg.batch_size, cfg.sampling, &mut rng);
        let mut sum_f = 0.0;
        let mut sum_quad = 0.0;
        let mut sum_lin = 0.0;
        let mut q_sum = 0.0;
        let mut q_count = 0usize;
        let mut q_max: f64 = 0.0;
        for (b, rows) in batches.iter().enumerate() {
            let x = features.select_rows(rows);
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let batch_ids: Vec<u64> = rows.iter().map(|&r| ids[r]).collect();
            let logits = model.forward_cached(&x)?;
            let obj = batch_objective(
                loss,
                cfg,
                &state,
                &logits,
                BatchContext {
                    labels: &batch_labels,
                    ids: &batch_ids,
                    critical: &critical,
                    num_classes: train_set.num_classes(),
                },
            )?;
            if !obj.value.is_finite() {
                return Err(AlmError::Diverged {
                    epoch,
                    batch: b,
                    trace: Box::new(trace),
                });
            }
            let grads = model.backward_logits(&obj.grad)?;
            optimizer.step(&mut model, &grads)?;

            let update = cfg.penalty_mode.uses_linear() && !obj.q.is_empty();
            let mu_used = state.mu;
            if update {
                lambda_update(&mut state, &obj.q)?;
            }
            sum_f += obj.loss;
            sum_quad += obj.terms.quadratic;
            sum_lin += obj.terms.linear;
            q_sum += obj.q.values.iter().sum::<f64>();
            q_count += obj.q.len();
            q_max = obj.q.values.iter().copied().fold(q_max, f64::max);
            trace.batches.push(BatchRecord {
                epoch,
                batch: b,
                mu: mu_used,
                keys: obj.q.keys,
                q: obj.q.values,
                lambda_updated: update,
            });
        }
        let metric = monitor(&model, epoch)?;
        state.mu = mu_update(state.mu, state.rho, metric, previous, cfg.val_tolerance);
        previous = metric;
        let nb = batches.len() as f64;
        trace.epochs.push(EpochRecord {
            epoch,
            val_metric: metric,
            mu: state.mu,
            mean_q: if q_count == 0 { 0.0 } else { q_sum / q_count as f64 },
            max_q: q_max,
            mean_lambda: state.mean_lambda(),
            loss_f: sum_f / nb,
            loss_quad: sum_quad / nb,
            loss_lin: sum_lin / nb,
        });

        if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
            best = Some((metric, epoch, model.params()));
        }
        if let (Some(patience), Some((_, best_epoch, _))) = (cfg.patience, best.as_ref()) {
            if epoch - best_epoch >= patience {
                trace.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    match (cfg.patience, best) {
        (Some(_), Some((_, epoch, params))) => {
            model.set_params(&params)?;
            trace.best_epoch = epoch;
        }
        _ => trace.best_epoch = trace.epochs.len(),
    }
    Ok(TrainOutcome { model, state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussians, Covariance, Sample};
    use crate::losses::LossKind;
    use crate::netcore::Head;

    fn gaussians(n0: usize, n1: usize, gap: f64, seed: u64) -> Dataset {
        gen_gaussians(
            &[n0, n1],
            &[vec![0.0, 0.0], vec![gap, gap]],
            &[Covariance::Diagonal(vec![1.0, 1.0]), Covariance::Diagonal(vec![1.0, 1.0])],
            seed,
        )
        .unwrap()
    }

    fn bce(d: &Dataset) -> LossSpec {
        LossSpec::new(LossKind::Bce, d.class_counts().to_vec()).unwrap()
    }

    fn small_cfg() -> AlmConfig {
        AlmConfig {
            mu0: 1e-2,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 3,
            patience: None,
            ..AlmConfig::default()
        }
    }

    #[test]
    fn mu_update_cases() {
        assert_eq!(mu_update(1e-5, 2.0, 0.79, 0.80, 1e-4), 2e-5);
        assert_eq!(mu_update(1e-5, 2.0, 0.81, 0.80, 1e-4), 1e-5);
        assert_eq!(mu_update(1e-5, 2.0, 0.79995, 0.800000, 1e-3), 1e-5);
    }

    #[test]
    fn lambda_update_cases() {
        let mut s = ConstraintState::new(1e-3, 2.0, 0.1).unwrap();
        let k = SampleKey::binary(4);
        s.register([k]);
        lambda_update(&mut s, &QVector::new(vec![k], vec![2.0]).unwrap()).unwrap();
        assert!((s.lambda(&k) - 0.002).abs() < 1e-18);
        lambda_update(&mut s, &QVector::new(vec![k], vec![0.0]).unwrap()).unwrap();
        assert!((s.lambda(&k) - 0.002).abs() < 1e-18);
        let mut t = ConstraintState::new(0.5, 2.0, 0.1).unwrap();
        t.register([k]);
        for _ in 0..8 {
            lambda_update(&mut t, &QVector::new(vec![k], vec![0.25]).unwrap()).unwrap();
        }
        assert_eq!(t.lambda(&k), 8.0 * 0.5 * 0.25);
        let unknown = QVector::new(vec![SampleKey::binary(99)], vec![1.0]).unwrap();
        assert!(lambda_update(&mut t, &unknown).is_err());
    }

    #[test]
    fn ablation_decomposition() {
        let t = PenaltyTerms {
            quadratic: 0.3,
            linear: 0.7,
        };
        let f = 1.25;
        assert_eq!(
            ablation_loss(PenaltyMode::Alm, f, &t),
            ablation_loss(PenaltyMode::QuadraticOnly, f, &t) + t.linear
        );
        assert_eq!(ablation_loss(PenaltyMode::LagrangianOnly, f, &t), f + t.linear);
        assert_eq!(ablation_loss(PenaltyMode::None, f, &t), f);
        let zero = PenaltyTerms::default();
        for m in [PenaltyMode::Alm, PenaltyMode::QuadraticOnly, PenaltyMode::LagrangianOnly] {
            assert_eq!(ablation_loss(m, f, &zero), f);
        }
    }

    #[test]
    fn quadratic_only_with_zero_mu_is_plain() {
        let d = gaussians(40, 10, 0.5, 1);
        let cfg = AlmConfig {
            mu0: 0.0,
            penalty_mode: PenaltyMode::QuadraticOnly,
            ..small_cfg()
        };
        let m = Mlp::new(2, &[8], 1, Head::SigmoidScalar, 5).unwrap();
        let a = train(m.clone(), &d, &d, &bce(&d), &cfg).unwrap();
        let b = train(m, &d, &d, &bce(&d), &cfg.baseline()).unwrap();
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn none_mode_matches_zero_mu() {
        let d = gaussians(60, 12, 0.8, 2);
        let m = Mlp::new(2, &[8, 8], 1, Head::SigmoidScalar, 7).unwrap();
        let none = train(m.clone(), &d, &d, &bce(&d), &small_cfg().baseline()).unwrap();
        let zero = AlmConfig {
            mu0: 0.0,
            ..small_cfg()
        };
        let z = train(m, &d, &d, &bce(&d), &zero).unwrap();
        assert_eq!(none.model.params(), z.model.params());
        assert!(z.state.lambda_map().values().all(|&l| l == 0.0));
    }

    #[test]
    fn single_batch_first_update() {
        let d = gaussians(20, 5, 0.0, 3);
        let cfg = AlmConfig {
            epochs: 1,
            batch_size: 1000,
            mu0: 0.1,
            ..small_cfg()
        };
        let m = Mlp::new(2, &[4], 1, Head::SigmoidScalar, 1).unwrap();
        let logits = m.logits(&d.features()).unwrap();
        let probs: Vec<f64> = logits.as_slice().iter().map(|&z| sigmoid(z)).collect();
        let out = train(m, &d, &d, &bce(&d), &cfg).unwrap();
        let rec = &out.trace.batches[0];
        // the single batch is a permutation of the whole set
        for (k, q) in rec.keys.iter().zip(&rec.q) {
            let p = probs[k.id as usize];
            let expected: f64 = (0..d.len())
                .filter(|&i| d.samples()[i].label == 0)
                .map(|i| (probs[i] - p + cfg.delta).max(0.0))
                .sum();
            assert!((q - expected).abs() < 1e-12);
            assert_eq!(out.state.lambda(k), 0.1 * q);
        }
    }

    #[test]
    fn forced_metric_drop_grows_mu() {
        let d = gaussians(40, 10, 1.0, 4);
        let cfg = AlmConfig {
            epochs: 2,
            ..small_cfg()
        };
        let m = Mlp::new(2, &[4], 1, Head::SigmoidScalar, 1).unwrap();
        let script = [0.8, 0.7, 0.71];
        let out = train_with_monitor(m, &d, &bce(&d), &cfg, &mut |_, e| Ok(script[e])).unwrap();
        let mus = out.trace.mu_sequence();
        assert_eq!(mus, vec![cfg.mu0 * cfg.rho, cfg.mu0 * cfg.rho]);
        assert_eq!(out.state.mu, cfg.mu0 * cfg.rho);
        // the second epoch's batches ran with the grown mu
        let last = out.trace.batches.last().unwrap();
        assert_eq!(last.epoch, 2);
        assert_eq!(last.mu, cfg.mu0 * cfg.rho);
    }

    #[test]
    fn stratified_batches_hold_a_positive() {
        let d = gaussians(500, 5, 1.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&d, 32, Sampling::Auto, &mut rng);
        assert_eq!(batches.len(), 505usize.div_ceil(32));
        for b in &batches {
            assert!(b.iter().any(|&r| d.samples()[r].label == 1));
            assert!(b.iter().any(|&r| d.samples()[r].label == 0));
        }
        let negs: usize = batches.iter().map(|b| b.iter().filter(|&&r| d.samples()[r].label == 0).count()).sum();
        assert_eq!(negs, 500);
    }

    #[test]
    fn deterministic_runs() {
        let d = gaussians(80, 20, 0.7, 6);
        let m = Mlp::new(2, &[8], 1, Head::SigmoidScalar, 2).unwrap();
        let a = train(m.clone(), &d, &d, &bce(&d), &small_cfg()).unwrap();
        let b = train(m, &d, &d, &bce(&d), &small_cfg()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn degenerate_inputs() {
        let s = |id, label| Sample {
            id,
            features: vec![0.0, 1.0],
            label,
        };
        let only_neg = Dataset::new(vec![s(0, 0), s(1, 0)], 2, [1].into()).unwrap();
        let m = Mlp::new(2, &[4], 1, Head::SigmoidScalar, 1).unwrap();
        let spec = LossSpec::new(LossKind::Bce, vec![2, 1]).unwrap();
        assert!(matches!(
            train(m.clone(), &only_neg, &only_neg, &spec, &small_cfg()),
            Err(AlmError::Degenerate(_))
        ));
        let bad = AlmConfig {
            rho: 1.0,
            ..small_cfg()
        };
        let d = gaussians(10, 5, 1.0, 1);
        assert!(matches!(train(m, &d, &d, &bce(&d), &bad), Err(AlmError::InvalidConfig(_))));
    }

    #[test]
    fn multiclass_run_updates_critical_keys() {
        let d = gen_gaussians(
            &[30, 20, 6],
            &[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.5]],
            &vec![Covariance::Diagonal(vec![0.5, 0.5]); 3],
            9,
        )
        .unwrap();
        assert_eq!(d.critical_classes(), &[2].into());
        let spec = LossSpec::new(LossKind::Ce, d.class_counts().to_vec()).unwrap();
        let cfg = AlmConfig {
            val_metric: ValMetric::Accuracy,
            mu0: 1.0,
            variant: MulticlassVariant::V2,
            ..small_cfg()
        };
        let m = Mlp::new(2, &[8], 3, Head::IdentityLogits, 1).unwrap();
        let out = train(m, &d, &d, &spec, &cfg).unwrap();
        assert_eq!(out.state.lambda_map().len(), 6);
        assert!(out.state.lambda_map().keys().all(|k| k.class == Some(2)));
        assert!(out.state.mean_lambda() > 0.0);
    }
}
