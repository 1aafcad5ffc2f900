//! Independent checks: exact toy-layout arithmetic, the appendix algebra,
//! finite-difference gradients and estimator equivalences.

pub mod appendix;
pub mod gradcheck;
pub mod toy;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::alm::AlmError;
use crate::constraint::{q_values, ConstraintError};
use crate::losses::LossError;
use crate::metrics::{auc_mann_whitney, auc_trapezoid, roc_from_groups, MetricsError};
use crate::netcore::NetError;

pub use appendix::{
    closed_form_cost, delta_diff_lim, delta_diff_lim_from, direct_cost, AppendixConfig, DirectCost,
    ParabolaCoefficients,
};
pub use toy::{
    asymmetry_demo, consistent_layouts, enumerate_layouts, swap_decrement, AsymmetryReport, Coefficients, LayoutMatch,
    Swap, ToyLayout,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("inapplicable swap: {0}")]
    InapplicableSwap(String),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("negative discriminant {0}")]
    NegativeDiscriminant(f64),
    #[error("check failed to run: {0}")]
    Check(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Alm(#[from] AlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    /// A measured discrepancy with a stated value that is recorded, not failed.
    Report,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Report => "REPORT",
        }
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub id: String,
    pub status: Status,
    pub expected: String,
    pub measured: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn has_failure(&self) -> bool {
        self.checks.iter().any(|c| c.status == Status::Fail)
    }

    pub fn count(&self, status: Status) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let w = self.checks.iter().map(|c| c.id.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<6}  {:<w$}  {:<28}  measured", "status", "check", "expected");
        for c in &self.checks {
            let _ = writeln!(s, "{:<6}  {:<w$}  {:<28}  {}", c.status.label(), c.id, c.expected, c.measured);
        }
        let _ = writeln!(
            s,
            "{} passed, {} failed, {} reported",
            self.count(Status::Pass),
            self.count(Status::Fail),
            self.count(Status::Report)
        );
        s
    }
}

/// Options for [`run_verify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub gradient_trials: usize,
    pub random_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_trials: 100,
            random_instances: 1000,
        }
    }
}

fn push(checks: &mut Vec<Check>, id: &str, status: Status, expected: impl Into<String>, measured: impl Into<String>) {
    checks.push(Check {
        id: id.to_string(),
        status,
        expected: expected.into(),
        measured: measured.into(),
    });
}

/// Unnormalized appendix cost by explicit double loop over pairs.
pub fn pairwise_appendix_cost(cfg: &AppendixConfig) -> Result<f64, OracleError> {
    let lay = appendix::layout(cfg)?;
    let mut total = 0.0;
    for &p in &lay.positives {
        let mut q = 0.0;
        for &n in &lay.negatives {
            let h = n - p;
            if h > 0.0 {
                q += h;
            }
        }
        let lambda_after = cfg.lambda + cfg.mu * q;
        total += 0.5 * cfg.mu * q * q + lambda_after * q;
    }
    Ok(total)
}

/// Appendix configurations over `(M, N)` in `2..=6` squared.
pub fn appendix_grid() -> Vec<AppendixConfig> {
    let mut out = Vec::new();
    for m in 2..=6 {
        for n in 2..=6 {
            out.push(AppendixConfig {
                m,
                n,
                delta: 0.3,
                delta_p: 0.9,
                delta_n: 0.6,
                lambda: 0.25,
                mu: 1.5,
            });
        }
    }
    out
}

fn toy_checks(checks: &mut Vec<Check>) -> Result<(), OracleError> {
    let start = Instant::now();
    let found = enumerate_layouts();
    let consistent = consistent_layouts();
    let elapsed = start.elapsed().as_secs_f64();
    let left = toy::paper_left();
    let right = toy::paper_right();
    push(
        checks,
        "toy/left_swap",
        Status::from_bool(!found.is_empty()),
        left.to_string(),
        format!("{} of 252 layouts match", found.len()),
    );
    let layouts: Vec<String> = consistent.iter().map(|m| m.layout.to_string()).collect();
    push(
        checks,
        "toy/right_swap_quadratic",
        Status::from_bool(!consistent.is_empty()),
        format!("{}·μΔ²", right.quadratic),
        format!("matched by {}", if layouts.is_empty() { "none".into() } else { layouts.join(",") }),
    );
    for m in &consistent {
        let r = m.right.expect("consistent layouts have a right swap");
        let status = if r.linear == right.linear { Status::Pass } else { Status::Report };
        push(
            checks,
            "toy/right_swap_linear",
            status,
            format!("{}·λΔ", right.linear),
            format!("{}·λΔ on {}", r.linear, m.layout),
        );
        let a = asymmetry_demo(&m.layout)?;
        push(
            checks,
            "toy/asymmetry/per_positive_prefers_left",
            Status::from_bool(a.per_positive_prefers_left),
            "left dominates",
            format!("left {} vs right {}", a.groupings[0].left, a.groupings[0].right),
        );
        push(
            checks,
            "toy/asymmetry/per_negative_prefers_right",
            Status::from_bool(a.per_negative_prefers_right),
            "right dominates",
            format!("left {} vs right {}", a.groupings[1].left, a.groupings[1].right),
        );
        push(
            checks,
            "toy/asymmetry/per_pair_identical",
            Status::from_bool(a.pair_mass_identical),
            "equal hinge mass change",
            format!("{}Δ vs {}Δ", a.pair_mass_change.0, a.pair_mass_change.1),
        );
    }
    push(
        checks,
        "toy/runtime",
        Status::from_bool(elapsed < 1.0),
        "< 1 s",
        if elapsed < 1.0 { "under 1 s".to_string() } else { format!("{elapsed:.3} s") },
    );
    Ok(())
}

fn appendix_checks(checks: &mut Vec<Check>) -> Result<(), OracleError> {
    let grid = appendix_grid();
    let mut worst_pairwise: f64 = 0.0;
    let mut worst_closed_without: f64 = 0.0;
    let mut worst_closed_full: f64 = 0.0;
    for cfg in &grid {
        let d = direct_cost(cfg)?;
        let pw = pairwise_appendix_cost(cfg)?;
        let closed = closed_form_cost(cfg)?;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        worst_pairwise = worst_pairwise.max(rel(d.total, pw));
        worst_closed_without = worst_closed_without.max(rel(closed, d.without_cross_pair));
        worst_closed_full = worst_closed_full.max(rel(closed, d.total));
    }
    push(
        checks,
        "appendix/direct_vs_pairwise",
        Status::from_bool(worst_pairwise <= 1e-12),
        "relative diff <= 1e-12",
        format!("max {worst_pairwise:.3e} over {} configs", grid.len()),
    );
    push(
        checks,
        "appendix/closed_form_vs_direct_without_cross_pair",
        Status::from_bool(worst_closed_without <= 1e-9),
        "relative diff <= 1e-9",
        format!("max {worst_closed_without:.3e}"),
    );
    push(
        checks,
        "appendix/closed_form_vs_direct",
        if worst_closed_full <= 1e-9 { Status::Pass } else { Status::Report },
        "closed form equals direct cost",
        format!(
            "max relative gap {worst_closed_full:.3e}: closed form omits the misranked positive vs misranked negative pair"
        ),
    );

    let mut worst_sub: f64 = 0.0;
    let mut monotone = true;
    for m in 2..=6 {
        let mut last = f64::NEG_INFINITY;
        for n in m..=12 {
            let cfg = AppendixConfig {
                m,
                n,
                delta: 0.3,
                delta_p: 0.9,
                delta_n: 0.0,
                lambda: 0.25,
                mu: 1.5,
            };
            let co = appendix::parabola_coefficients(&cfg)?;
            let x = delta_diff_lim(&cfg)?;
            let lhs = appendix::positive_contribution(&co, cfg.delta_p);
            let rhs = appendix::negative_contribution(&co, cfg.delta_p + x);
            worst_sub = worst_sub.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            if n > m && x <= last {
                monotone = false;
            }
            last = x;
        }
    }
    push(
        checks,
        "appendix/delta_diff_lim_substitution",
        Status::from_bool(worst_sub <= 1e-9),
        "contributions equal within 1e-9",
        format!("max {worst_sub:.3e}"),
    );
    push(
        checks,
        "appendix/delta_diff_lim_grows_with_n",
        Status::from_bool(monotone),
        "strictly increasing in N",
        if monotone { "increasing" } else { "not monotone" },
    );
    let mut dominates = true;
    for cfg in grid.iter().filter(|c| c.m < c.n) {
        let same = AppendixConfig {
            delta_n: cfg.delta_p,
            ..*cfg
        };
        let d = direct_cost(&same)?;
        dominates &= d.positive_error > d.negative_error;
    }
    push(
        checks,
        "appendix/positive_error_dominates",
        Status::from_bool(dominates),
        "positive term > negative terms when M < N",
        if dominates { "holds" } else { "violated" },
    );
    Ok(())
}

fn gradient_checks(checks: &mut Vec<Check>, opts: &VerifyOptions) -> Result<(), OracleError> {
    for r in gradcheck::check_all(opts.gradient_trials, opts.seed)? {
        push(
            checks,
            &format!("gradient/{}", r.name),
            Status::from_bool(r.passed),
            format!("rel err <= {:e}", gradcheck::TOLERANCE),
            format!("{:.3e} over {} trials", r.max_relative_error, r.trials),
        );
    }
    Ok(())
}

/// Scores drawn from a small grid so ties are frequent.
pub fn random_scores(rng: &mut ChaCha8Rng, len: usize, tied: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if tied {
                f64::from(rng.random_range(0..8)) / 8.0
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect()
}

/// Worst |Mann-Whitney - trapezoid| over random instances, half of them tied.
pub fn auc_equivalence(instances: usize, seed: u64) -> Result<f64, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let p = rng.random_range(1..40);
        let n = rng.random_range(1..40);
        let pos = random_scores(&mut rng, p, i % 2 == 0);
        let neg = random_scores(&mut rng, n, i % 2 == 0);
        let mw = auc_mann_whitney(&pos, &neg)?;
        let tr = auc_trapezoid(&roc_from_groups(&pos, &neg)?);
        worst = worst.max((mw - tr).abs());
    }
    Ok(worst)
}

/// Counts of violations of `q == 0 <=> min p - max n >= delta` and the worst
/// fast-vs-brute-force difference.
pub fn constraint_semantics(instances: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let p = rng.random_range(1..=64);
        let n = rng.random_range(1..=64);
        let delta = rng.random_range(0.0..0.5);
        let mut pos = random_scores(&mut rng, p, false);
        let neg = random_scores(&mut rng, n, false);
        if i % 2 == 0 {
            // separate half of the instances so both sides of the equivalence occur
            let shift = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max) - pos.iter().copied().fold(f64::INFINITY, f64::min)
                + rng.random_range(-0.3..0.8);
            for v in pos.iter_mut() {
                *v += shift;
            }
        }
        let q = q_values(&pos, &neg, delta);
        let brute: Vec<f64> = pos
            .iter()
            .map(|&pj| neg.iter().map(|&nk| (nk - pj + delta).max(0.0)).sum())
            .collect();
        for (a, b) in q.iter().zip(&brute) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        let gap = pos.iter().copied().fold(f64::INFINITY, f64::min) - neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let all_zero = q.iter().all(|&v| v == 0.0);
        if all_zero != (gap >= delta) {
            mismatches += 1;
        }
    }
    (mismatches, worst)
}

fn estimator_checks(checks: &mut Vec<Check>, opts: &VerifyOptions) -> Result<(), OracleError> {
    let worst = auc_equivalence(opts.random_instances, opts.seed)?;
    push(
        checks,
        "auc/mann_whitney_vs_trapezoid",
        Status::from_bool(worst <= 1e-12),
        "abs diff <= 1e-12",
        format!("max {worst:.3e} over {} instances", opts.random_instances),
    );
    let (mismatches, worst_q) = constraint_semantics(opts.random_instances, opts.seed);
    push(
        checks,
        "constraint/zero_iff_separated",
        Status::from_bool(mismatches == 0),
        "no mismatches",
        format!("{mismatches} mismatches"),
    );
    push(
        checks,
        "constraint/fast_vs_brute_force",
        Status::from_bool(worst_q <= 1e-12),
        "relative diff <= 1e-12",
        format!("max {worst_q:.3e}"),
    );
    Ok(())
}

/// Runs every check.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport, OracleError> {
    let mut checks = Vec::new();
    toy_checks(&mut checks)?;
    appendix_checks(&mut checks)?;
    gradient_checks(&mut checks, opts)?;
    estimator_checks(&mut checks, opts)?;
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_direct() {
        for cfg in appendix_grid() {
            let d = direct_cost(&cfg).unwrap();
            let p = pairwise_appendix_cost(&cfg).unwrap();
            assert!((d.total - p).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn quick_verify_has_no_failures() {
        let r = run_verify(&VerifyOptions {
            seed: 1,
            gradient_trials: 3,
            random_instances: 100,
        })
        .unwrap();
        assert!(!r.has_failure(), "{}", r.table());
        let reports: Vec<&str> = r
            .checks
            .iter()
            .filter(|c| c.status == Status::Report)
            .map(|c| c.id.as_str())
            .collect();
        assert_eq!(reports, vec!["toy/right_swap_linear", "appendix/closed_form_vs_direct"]);
    }
}
