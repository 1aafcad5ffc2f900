//! Staged grid search, k-split ensembling, evaluation bundles and result tables.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alm::{train, validation_metric, AlmConfig, AlmError, PenaltyMode, ValMetric};
use crate::data::{split_seed, stratified_splits, DataError, Dataset};
use crate::losses::{LossError, LossKind, LossSpec};
use crate::metrics::{
    accuracy, auc_mann_whitney, binary_accuracy, ensemble_logits, fpr_at_tpr, multiclass_error_at_tpr, pearson,
    roc_from_groups, MetricsError,
};
use crate::netcore::{sigmoid, Head, Matrix, Mlp, NetError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("grid has an empty candidate set: {0}")]
    EmptyGrid(&'static str),
    #[error("budget of {0} runs exhausted before any run finished")]
    BudgetExhausted(usize),
    #[error(transparent)]
    Alm(#[from] AlmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// TPR levels reported for binary tasks.
pub const BINARY_TPR_LEVELS: [f64; 4] = [0.98, 0.95, 0.92, 0.90];
/// TPR levels reported for multi-class tasks.
pub const MULTICLASS_TPR_LEVELS: [f64; 2] = [0.80, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![32, 32] }
    }
}

impl ModelSpec {
    /// Fresh model for a dataset; one sigmoid output for binary data.
    pub fn build(&self, data: &Dataset, seed: u64) -> Result<Mlp, NetError> {
        let (outputs, head) = if data.num_classes() == 2 {
            (1, Head::SigmoidScalar)
        } else {
            (data.num_classes(), Head::IdentityLogits)
        };
        Mlp::new(data.feature_dim(), &self.hidden, outputs, head, seed)
    }
}

/// One trainable configuration: a loss and the constraint settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub loss: LossKind,
    pub penalty_mode: PenaltyMode,
    pub mu0: f64,
    pub rho: f64,
    pub delta: f64,
}

impl Candidate {
    pub fn from_config(loss: LossKind, cfg: &AlmConfig) -> Self {
        Self {
            loss,
            penalty_mode: cfg.penalty_mode,
            mu0: cfg.mu0,
            rho: cfg.rho,
            delta: cfg.delta,
        }
    }

    pub fn apply(&self, base: &AlmConfig) -> AlmConfig {
        AlmConfig {
            penalty_mode: self.penalty_mode,
            mu0: self.mu0,
            rho: self.rho,
            delta: self.delta,
            ..base.clone()
        }
    }

    /// Method label such as `bce` or `alm+bce`.
    pub fn method(&self) -> String {
        match self.penalty_mode {
            PenaltyMode::None => self.loss.name().to_string(),
            PenaltyMode::Alm => format!("alm+{}", self.loss.name()),
            PenaltyMode::QuadraticOnly => format!("quadratic+{}", self.loss.name()),
            PenaltyMode::LagrangianOnly => format!("lagrangian+{}", self.loss.name()),
        }
    }

    /// Canonical text used for lexicographic tie-breaking.
    pub fn key(&self) -> String {
        let loss = serde_json::to_string(&self.loss).expect("loss kinds serialize");
        format!(
            "{}|{:?}|mu0={:e}|rho={:e}|delta={:e}",
            loss, self.penalty_mode, self.mu0, self.rho, self.delta
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mu0: Vec<f64>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    /// Baseline-loss hyperparameter candidates, searched first.
    pub losses: Vec<LossKind>,
}

impl GridSpec {
    pub const MU0: [f64; 5] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3];
    pub const RHO: [f64; 2] = [2.0, 3.0];
    pub const DELTA_BINARY: [f64; 4] = [0.1, 0.25, 0.5, 1.0];
    pub const DELTA_MULTICLASS: [f64; 2] = [0.05, 0.1];

    /// Default grid for a task. `imbalance` is the majority/minority ratio
    /// used by the weighted-BCE candidates.
    pub fn for_task(loss: LossKind, multiclass: bool, imbalance: f64) -> Self {
        Self {
            mu0: Self::MU0.to_vec(),
            rho: Self::RHO.to_vec(),
            delta: if multiclass {
                Self::DELTA_MULTICLASS.to_vec()
            } else {
                Self::DELTA_BINARY.to_vec()
            },
            losses: loss_candidates(loss, imbalance),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        for (name, set) in [("mu0", &self.mu0), ("rho", &self.rho), ("delta", &self.delta)] {
            if set.is_empty() {
                return Err(ExperimentError::EmptyGrid(name));
            }
        }
        if self.losses.is_empty() {
            return Err(ExperimentError::EmptyGrid("losses"));
        }
        Ok(())
    }

    /// Checks the grid-run ranges of the constraint parameters.
    pub fn validate_ranges(&self, multiclass: bool) -> Result<(), ExperimentError> {
        self.validate()?;
        if let Some(m) = self.mu0.iter().find(|&&m| !(1e-7..=1e-3).contains(&m)) {
            return Err(ExperimentError::Invalid(format!("grid mu0 {m} outside [1e-7, 1e-3]")));
        }
        if let Some(r) = self.rho.iter().find(|&&r| r != 2.0 && r != 3.0) {
            return Err(ExperimentError::Invalid(format!("grid rho {r} not in {{2, 3}}")));
        }
        let allowed: &[f64] = if multiclass {
            &Self::DELTA_MULTICLASS
        } else {
            &Self::DELTA_BINARY
        };
        if let Some(d) = self.delta.iter().find(|d| !allowed.contains(d)) {
            return Err(ExperimentError::Invalid(format!("grid delta {d} not in {allowed:?}")));
        }
        Ok(())
    }
}

/// Hyperparameter candidates of a baseline loss.
pub fn loss_candidates(loss: LossKind, imbalance: f64) -> Vec<LossKind> {
    match loss {
        LossKind::Bce | LossKind::Ce => vec![loss],
        LossKind::Wbce { .. } => [1.0 / 3.0, 2.0 / 3.0, 1.0]
            .iter()
            .map(|f| LossKind::Wbce { w: f * imbalance })
            .collect(),
        LossKind::CbBce { .. } => [0.99, 0.999, 0.9999].map(|beta| LossKind::CbBce { beta }).to_vec(),
        LossKind::CbCe { .. } => [0.99, 0.999, 0.9999].map(|beta| LossKind::CbCe { beta }).to_vec(),
        LossKind::SFl { .. } => [0.5, 1.0, 2.0].map(|gamma| LossKind::SFl { gamma }).to_vec(),
        LossKind::AFl { m, .. } => [0.5, 1.0, 2.0].map(|gamma| LossKind::AFl { gamma, m }).to_vec(),
        LossKind::SMl { .. } => [0.5, 2.0, 4.0].map(|m| LossKind::SMl { m }).to_vec(),
        LossKind::AMl { .. } => [0.5, 2.0, 4.0].map(|m| LossKind::AMl { m }).to_vec(),
        LossKind::Ldam { .. } => [0.3, 0.5].map(|s| LossKind::Ldam { s }).to_vec(),
        LossKind::Mbauc { .. } => [0.1, 1.0].map(|margin| LossKind::Mbauc { margin }).to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Loss,
    MuRho,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub stage: Stage,
    pub candidate: Candidate,
    pub val_metric: f64,
}

/// Metric descending, then candidate key ascending.
pub fn leaderboard_order(a: &LeaderboardEntry, b: &LeaderboardEntry) -> Ordering {
    b.val_metric
        .total_cmp(&a.val_metric)
        .then_with(|| a.candidate.key().cmp(&b.candidate.key()))
}

/// Best entry under [`leaderboard_order`].
pub fn select_best(entries: &[LeaderboardEntry]) -> Option<&LeaderboardEntry> {
    entries.iter().min_by(|a, b| leaderboard_order(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOutcome {
    pub best: Candidate,
    pub best_metric: f64,
    /// Sorted by [`leaderboard_order`].
    pub leaderboard: Vec<LeaderboardEntry>,
    /// True when the budget stopped the search early.
    pub exhausted: bool,
}

impl GridOutcome {
    pub fn write_leaderboard_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "stage", "method", "loss", "mu0", "rho", "delta", "val_metric"])?;
        for (i, e) in self.leaderboard.iter().enumerate() {
            let c = &e.candidate;
            w.write_record([
                (i + 1).to_string(),
                format!("{:?}", e.stage).to_lowercase(),
                c.method(),
                serde_json::to_string(&c.loss).expect("loss kinds serialize"),
                c.mu0.to_string(),
                c.rho.to_string(),
                c.delta.to_string(),
                e.val_metric.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of the model initialisation for a split; shared by every candidate so
/// that candidates differ only in their hyperparameters.
pub fn model_seed(base: u64, split: usize) -> u64 {
    split_seed(base ^ 0x6D6F_6465_6C00_0000, split)
}

/// Seed of the batch order for a split.
pub fn batch_seed(base: u64, split: usize) -> u64 {
    split_seed(base ^ 0x6261_7463_6800_0000, split)
}

/// Shared inputs of the runs in one search or ensemble.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub model: &'a ModelSpec,
    pub base: &'a AlmConfig,
    pub split: usize,
}

/// Trains one candidate and returns the model with its validation metric.
pub fn run_candidate(
    train_set: &Dataset,
    validation: &Dataset,
    candidate: &Candidate,
    ctx: RunContext<'_>,
) -> Result<(Mlp, f64), ExperimentError> {
    let mut cfg = candidate.apply(ctx.base);
    cfg.seed = batch_seed(ctx.base.seed, ctx.split);
    let spec = LossSpec::new(candidate.loss, train_set.class_counts().to_vec())?;
    let model = ctx.model.build(train_set, model_seed(ctx.base.seed, ctx.split))?;
    let out = train(model, train_set, validation, &spec, &cfg)?;
    let metric = validation_metric(&out.model, validation, cfg.val_metric)?;
    Ok((out.model, metric))
}

struct Search<'a> {
    train_set: &'a Dataset,
    validation: &'a Dataset,
    ctx: RunContext<'a>,
    remaining: usize,
    exhausted: bool,
    board: Vec<LeaderboardEntry>,
}

impl Search<'_> {
    /// Runs the candidates not yet on the board, in parallel, within the budget.
    fn run_stage(&mut self, stage: Stage, cands: Vec<Candidate>) -> Result<Vec<LeaderboardEntry>, ExperimentError> {
        let fresh: Vec<Candidate> = cands
            .into_iter()
            .filter(|c| !self.board.iter().any(|e| e.candidate == *c))
            .collect();
        let take = fresh.len().min(self.remaining);
        if take < fresh.len() {
            self.exhausted = true;
        }
        self.remaining -= take;
        let results: Vec<Result<f64, ExperimentError>> = fresh[..take]
            .par_iter()
            .map(|c| run_candidate(self.train_set, self.validation, c, self.ctx).map(|(_, m)| m))
            .collect();
        let mut entries = Vec::with_capacity(take);
        for (c, r) in fresh.into_iter().zip(results) {
            entries.push(LeaderboardEntry {
                stage,
                candidate: c,
                val_metric: r?,
            });
        }
        self.board.extend(entries.iter().cloned());
        Ok(entries)
    }
}

/// Staged search: baseline-loss hyperparameters (constraint off), then
/// `(mu0, rho)` at the first delta, then delta. Selection uses only the
/// validation set. `budget` caps the number of training runs.
pub fn grid_search(
    train_set: &Dataset,
    validation: &Dataset,
    grid: &GridSpec,
    ctx: RunContext<'_>,
    budget: Option<usize>,
) -> Result<GridOutcome, ExperimentError> {
    grid.validate()?;
    let mut search = Search {
        train_set,
        validation,
        ctx,
        remaining: budget.unwrap_or(usize::MAX),
        exhausted: false,
        board: Vec::new(),
    };

    let base = Candidate::from_config(grid.losses[0], ctx.base);
    let stage1: Vec<Candidate> = grid
        .losses
        .iter()
        .map(|&loss| Candidate {
            loss,
            penalty_mode: PenaltyMode::None,
            ..base.clone()
        })
        .collect();
    let s1 = search.run_stage(Stage::Loss, stage1)?;
    let best_loss = select_best(&s1)
        .map(|e| e.candidate.loss)
        .ok_or(ExperimentError::BudgetExhausted(budget.unwrap_or(0)))?;

    let constrained = ctx.base.penalty_mode != PenaltyMode::None;
    if constrained && !search.exhausted {
        let mut stage2 = Vec::new();
        for &mu0 in &grid.mu0 {
            for &rho in &grid.rho {
                stage2.push(Candidate {
                    loss: best_loss,
                    penalty_mode: ctx.base.penalty_mode,
                    mu0,
                    rho,
                    delta: grid.delta[0],
                });
            }
        }
        let s2 = search.run_stage(Stage::MuRho, stage2)?;
        if let (Some(best2), false) = (select_best(&s2).cloned(), search.exhausted) {
            let stage3 = grid
                .delta
                .iter()
                .map(|&delta| Candidate {
                    delta,
                    ..best2.candidate.clone()
                })
                .collect();
            search.run_stage(Stage::Delta, stage3)?;
        }
    }

    let Search { mut board, exhausted, .. } = search;
    let eligible: Vec<LeaderboardEntry> = board
        .iter()
        .filter(|e| !constrained || e.stage != Stage::Loss)
        .cloned()
        .collect();
    let pick = select_best(&eligible)
        .or_else(|| select_best(&board))
        .cloned()
        .ok_or(ExperimentError::BudgetExhausted(budget.unwrap_or(0)))?;
    board.sort_by(leaderboard_order);
    Ok(GridOutcome {
        best: pick.candidate,
        best_metric: pick.val_metric,
        leaderboard: board,
        exhausted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAt {
    pub tpr: f64,
    pub value: f64,
}

/// Test metrics of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvalMetrics {
    Binary {
        auc: f64,
        fpr_at_tpr: Vec<RateAt>,
        accuracy: f64,
    },
    Multiclass {
        /// One-vs-rest AUC of the critical-class logit.
        critical_auc: f64,
        error_at_tpr: Vec<RateAt>,
        accuracy: f64,
    },
}

impl EvalMetrics {
    pub fn auc(&self) -> f64 {
        match self {
            EvalMetrics::Binary { auc, .. } => *auc,
            EvalMetrics::Multiclass { critical_auc, .. } => *critical_auc,
        }
    }

    pub fn accuracy(&self) -> f64 {
        match self {
            EvalMetrics::Binary { accuracy, .. } | EvalMetrics::Multiclass { accuracy, .. } => *accuracy,
        }
    }

    pub fn rates(&self) -> &[RateAt] {
        match self {
            EvalMetrics::Binary { fpr_at_tpr, .. } => fpr_at_tpr,
            EvalMetrics::Multiclass { error_at_tpr, .. } => error_at_tpr,
        }
    }

    pub fn rate_at(&self, tpr: f64) -> Option<f64> {
        self.rates().iter().find(|r| r.tpr == tpr).map(|r| r.value)
    }
}

/// Evaluates logits against a labelled set. Binary logits have one column.
pub fn evaluate_logits(logits: &Matrix, data: &Dataset) -> Result<EvalMetrics, ExperimentError> {
    let labels = data.labels();
    let critical = data.critical_classes();
    if logits.rows() != labels.len() {
        return Err(ExperimentError::Invalid(format!(
            "{} predictions for {} samples",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.cols() == 1 {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&z, l) in logits.as_slice().iter().zip(&labels) {
            if critical.contains(l) {
                pos.push(z);
            } else {
                neg.push(z);
            }
        }
        let curve = roc_from_groups(&pos, &neg)?;
        let fpr = BINARY_TPR_LEVELS
            .iter()
            .map(|&t| fpr_at_tpr(&curve, t).map(|value| RateAt { tpr: t, value }))
            .collect::<Result<Vec<_>, _>>()?;
        let probs: Vec<f64> = logits.as_slice().iter().map(|&z| sigmoid(z)).collect();
        let is_pos: Vec<bool> = labels.iter().map(|l| critical.contains(l)).collect();
        Ok(EvalMetrics::Binary {
            auc: auc_mann_whitney(&pos, &neg)?,
            fpr_at_tpr: fpr,
            accuracy: binary_accuracy(&probs, &is_pos)?,
        })
    } else {
        let c = *critical.iter().next().expect("critical set is non-empty");
        let col = logits.col_values(c);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&z, &l) in col.iter().zip(&labels) {
            if l == c {
                pos.push(z);
            } else {
                neg.push(z);
            }
        }
        let errors = MULTICLASS_TPR_LEVELS
            .iter()
            .map(|&t| multiclass_error_at_tpr(logits, &labels, c, t).map(|e| RateAt { tpr: t, value: e.error }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalMetrics::Multiclass {
            critical_auc: auc_mann_whitney(&pos, &neg)?,
            error_at_tpr: errors,
            accuracy: accuracy(logits, &labels)?,
        })
    }
}

pub fn evaluate_model(model: &Mlp, data: &Dataset) -> Result<EvalMetrics, ExperimentError> {
    evaluate_logits(&model.logits(&data.features())?, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub candidate: Candidate,
    pub k: usize,
    pub per_split: Vec<EvalMetrics>,
    pub ensemble: EvalMetrics,
    pub mean_auc: f64,
    pub std_auc: f64,
    /// Validation metric of each split's model.
    pub val_metrics: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains `k` models on stratified splits of `pool` and evaluates each, and
/// their logit average, on `test`.
pub fn ensemble_run(
    pool: &Dataset,
    test: &Dataset,
    candidate: &Candidate,
    model: &ModelSpec,
    base: &AlmConfig,
    k: usize,
    train_fraction: f64,
) -> Result<ExperimentResult, ExperimentError> {
    if k == 0 {
        return Err(ExperimentError::Invalid("ensemble needs k >= 1".into()));
    }
    let splits = stratified_splits(pool, k, train_fraction, base.seed)?;
    let runs: Vec<Result<(Matrix, f64), ExperimentError>> = splits
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let ctx = RunContext { model, base, split: i };
            let (m, val) = run_candidate(&s.train, &s.validation, candidate, ctx)?;
            Ok((m.logits(&test.features())?, val))
        })
        .collect();
    let mut logits = Vec::with_capacity(k);
    let mut val_metrics = Vec::with_capacity(k);
    for r in runs {
        let (l, v) = r?;
        logits.push(l);
        val_metrics.push(v);
    }
    let per_split = logits
        .iter()
        .map(|l| evaluate_logits(l, test))
        .collect::<Result<Vec<_>, _>>()?;
    let ensemble = evaluate_logits(&ensemble_logits(&logits)?, test)?;
    let aucs: Vec<f64> = per_split.iter().map(EvalMetrics::auc).collect();
    let (mean_auc, std_auc) = mean_std(&aucs);
    Ok(ExperimentResult {
        method: candidate.method(),
        candidate: candidate.clone(),
        k,
        per_split,
        ensemble,
        mean_auc,
        std_auc,
        val_metrics,
    })
}

/// Pearson correlation between baseline AUC and the improvement over it.
pub fn improvement_correlation(pairs: &[(f64, f64)]) -> Result<f64, ExperimentError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: pairs.len(),
        }
        .into());
    }
    let base: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let gain: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
    Ok(pearson(&base, &gain)?)
}

fn column_headers(result: &ExperimentResult) -> Vec<String> {
    let mut cols: Vec<String> = match result.ensemble {
        EvalMetrics::Binary { .. } => BINARY_TPR_LEVELS
            .iter()
            .map(|t| format!("FPR@{:.0}%TPR", t * 100.0))
            .collect(),
        EvalMetrics::Multiclass { .. } => MULTICLASS_TPR_LEVELS
            .iter()
            .map(|t| format!("Err@{:.0}%TPR", t * 100.0))
            .collect(),
    };
    match result.ensemble {
        EvalMetrics::Binary { .. } => cols.extend(["Avg AUC".to_string(), "AUC ens.".to_string()]),
        EvalMetrics::Multiclass { .. } => cols.push("Acc".to_string()),
    }
    cols
}

fn row_values(result: &ExperimentResult) -> Vec<f64> {
    let mut v: Vec<f64> = result.ensemble.rates().iter().map(|r| 100.0 * r.value).collect();
    match result.ensemble {
        EvalMetrics::Binary { auc, .. } => {
            v.push(100.0 * result.mean_auc);
            v.push(100.0 * auc);
        }
        EvalMetrics::Multiclass { accuracy, .. } => v.push(100.0 * accuracy),
    }
    v
}

/// Markdown table with one row per method. Rates and errors are lower-is-better,
/// AUC and accuracy higher-is-better; the best value of each column is wrapped
/// in `*`.
pub fn markdown_table(results: &[ExperimentResult]) -> Result<String, ExperimentError> {
    let first = results
        .first()
        .ok_or_else(|| ExperimentError::Invalid("no results to tabulate".into()))?;
    let headers = column_headers(first);
    let rows: Vec<Vec<f64>> = results.iter().map(row_values).collect();
    if let Some(r) = results.iter().find(|r| column_headers(r) != headers) {
        return Err(ExperimentError::Invalid(format!("result `{}` has different columns", r.method)));
    }
    let n_rates = first.ensemble.rates().len();
    let best: Vec<f64> = (0..headers.len())
        .map(|c| {
            let col = rows.iter().map(|r| r[c]);
            if c < n_rates {
                col.fold(f64::INFINITY, f64::min)
            } else {
                col.fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, "| Method | {} |", headers.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(headers.len()));
    for (r, vals) in results.iter().zip(&rows) {
        let cells: Vec<String> = vals
            .iter()
            .zip(&best)
            .map(|(v, b)| {
                let txt = format!("{v:.1}");
                if txt == format!("{b:.1}") {
                    format!("*{txt}*")
                } else {
                    txt
                }
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", r.method, cells.join(" | "));
    }
    Ok(s)
}

/// One CSV row per result with the ensembled metrics.
pub fn write_results_csv<W: Write>(results: &[ExperimentResult], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = results.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["method".to_string()];
    header.extend(column_headers(first));
    header.extend(["std AUC".to_string(), "accuracy".to_string()]);
    w.write_record(&header)?;
    for r in results {
        let mut rec = vec![r.method.clone()];
        rec.extend(row_values(r).iter().map(|v| v.to_string()));
        rec.push((100.0 * r.std_auc).to_string());
        rec.push(r.ensemble.accuracy().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Validation metric a task is selected on.
pub fn task_metric(data: &Dataset) -> ValMetric {
    if data.num_classes() == 2 {
        ValMetric::Auc
    } else {
        ValMetric::Accuracy
    }
}
