//! The one-mistake-per-class configuration: explicit layout, direct cost,
//! the stated closed form, and the limiting gap `Δ_diff,lim`.
//!
//! Costs are the unnormalized aggregate `Σ_j μ/2 q_j² + λ'_j q_j` with the
//! post-update multiplier `λ'_j = λ + μ q_j`, i.e. `Σ_j 3μ/2 q_j² + λ q_j`.

use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::constraint::q_values;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppendixConfig {
    /// Positives.
    pub m: usize,
    /// Negatives.
    pub n: usize,
    /// Spacing between adjacent correctly ranked samples.
    pub delta: f64,
    /// Gap between the misranked positive and the lowest negative.
    pub delta_p: f64,
    /// Gap between the highest positive and the misranked negative.
    pub delta_n: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl AppendixConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.m < 2 || self.n < 2 {
            return Err(OracleError::InvalidCounts(format!(
                "need at least two samples per class, got M={}, N={}",
                self.m, self.n
            )));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("delta_p", self.delta_p),
            ("delta_n", self.delta_n),
            ("lambda", self.lambda),
            ("mu", self.mu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(OracleError::InvalidCounts(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn require_m_le_n(&self) -> Result<(), OracleError> {
        if self.m > self.n {
            return Err(OracleError::InvalidCounts(format!(
                "M={} exceeds N={}; the positive class must be the smaller one",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

/// Scores of the explicit layout. `positives[0]` is the misranked positive,
/// `negatives[n - 1]` the misranked negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendixLayout {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

pub fn layout(cfg: &AppendixConfig) -> Result<AppendixLayout, OracleError> {
    cfg.validate()?;
    let (m, n) = (cfg.m, cfg.n);
    let mut negatives: Vec<f64> = (0..n - 1).map(|k| cfg.delta_p + k as f64 * cfg.delta).collect();
    let mut positives = vec![0.0];
    positives.extend((0..m - 1).map(|i| cfg.delta_p + (n - 1 + i) as f64 * cfg.delta));
    let top = *positives.last().expect("m >= 2");
    negatives.push(top + cfg.delta_n);
    Ok(AppendixLayout { positives, negatives })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleTerm {
    pub q: f64,
    /// `q` assumed by the closed form for this positive.
    pub q_closed_form: f64,
    pub lambda_after: f64,
    /// `μ/2 q² + λ' q`.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectCost {
    pub total: f64,
    /// Term of the misranked positive.
    pub positive_error: f64,
    /// Terms of the remaining positives, all caused by the misranked negative.
    pub negative_error: f64,
    /// Cost with the pair (misranked positive, misranked negative) left out.
    pub without_cross_pair: f64,
    pub per_sample: Vec<SampleTerm>,
}

fn term(q: f64, cfg: &AppendixConfig) -> f64 {
    let lambda_after = cfg.lambda + cfg.mu * q;
    0.5 * cfg.mu * q * q + lambda_after * q
}

/// Closed-form `q` per positive: the misranked positive only against the
/// correctly ranked negatives, every other positive only against the
/// misranked negative.
fn closed_form_q(cfg: &AppendixConfig) -> Vec<f64> {
    let n1 = (cfg.n - 1) as f64;
    let mut q = vec![cfg.delta_p * n1 + cfg.delta * n1 * (n1 - 1.0) / 2.0];
    // positives[i] for i = 1..m is lambda_{M-j} with j = m - 1 - i
    q.extend((1..cfg.m).map(|i| cfg.delta_n + (cfg.m - 1 - i) as f64 * cfg.delta));
    q
}

/// Evaluates the cost on the explicit layout.
pub fn direct_cost(cfg: &AppendixConfig) -> Result<DirectCost, OracleError> {
    let lay = layout(cfg)?;
    let q = q_values(&lay.positives, &lay.negatives, 0.0);
    let qc = closed_form_q(cfg);
    let per_sample: Vec<SampleTerm> = q
        .iter()
        .zip(&qc)
        .map(|(&q, &q_closed_form)| SampleTerm {
            q,
            q_closed_form,
            lambda_after: cfg.lambda + cfg.mu * q,
            cost: term(q, cfg),
        })
        .collect();
    let total = per_sample.iter().map(|s| s.cost).sum();
    let cross = (lay.negatives[cfg.n - 1] - lay.positives[0]).max(0.0);
    let q0_without = q[0] - cross;
    let rest: f64 = per_sample[1..].iter().map(|s| s.cost).sum();
    Ok(DirectCost {
        total,
        positive_error: per_sample[0].cost,
        negative_error: rest,
        without_cross_pair: term(q0_without, cfg) + rest,
        per_sample,
    })
}

/// The stated closed form, evaluated term by term as written.
pub fn closed_form_cost(cfg: &AppendixConfig) -> Result<f64, OracleError> {
    cfg.validate()?;
    let (m1, n1) = ((cfg.m - 1) as f64, (cfg.n - 1) as f64);
    let (m2, n2) = (m1 - 1.0, n1 - 1.0);
    let (d, dp, dn, l, mu) = (cfg.delta, cfg.delta_p, cfg.delta_n, cfg.lambda, cfg.mu);
    let k = 1.5 * mu;
    Ok(k * (dp * dp * n1 * n1 + dn * dn * m1)
        + dp * (k * d * n1 * n1 * n2 + l * n1)
        + dn * (k * d * m1 * m2 + l * m1)
        + k * d * d * ((n1 * n2).powi(2) / 4.0 + (2.0 * m1 - 1.0) * m1 * m2 / 6.0)
        + l * d * (n1 * n2 / 2.0 + m1 * m2 / 2.0))
}

/// `a, b, c, d` of `a Δ_P² + b Δ_P = c (Δ_P + x)² + d (Δ_P + x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParabolaCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

pub fn parabola_coefficients(cfg: &AppendixConfig) -> Result<ParabolaCoefficients, OracleError> {
    cfg.validate()?;
    let (m1, n1) = ((cfg.m - 1) as f64, (cfg.n - 1) as f64);
    let k = 1.5 * cfg.mu * cfg.delta;
    Ok(ParabolaCoefficients {
        a: n1 * n1,
        b: k * n1 * n1 * (n1 - 1.0) + cfg.lambda * n1,
        c: m1,
        d: k * m1 * (m1 - 1.0) + cfg.lambda * m1,
    })
}

/// Positive-error contribution `a Δ_P² + b Δ_P`.
pub fn positive_contribution(co: &ParabolaCoefficients, delta_p: f64) -> f64 {
    co.a * delta_p * delta_p + co.b * delta_p
}

/// Negative-error contribution `c Δ_N² + d Δ_N`.
pub fn negative_contribution(co: &ParabolaCoefficients, delta_n: f64) -> f64 {
    co.c * delta_n * delta_n + co.d * delta_n
}

/// Positive root of `c x² + (2 Δ_P c + d) x + Δ_P²(c - a) + Δ_P(d - b) = 0`.
pub fn delta_diff_lim_from(co: &ParabolaCoefficients, delta_p: f64) -> Result<f64, OracleError> {
    if co.c.is_nan() || co.c <= 0.0 {
        return Err(OracleError::InvalidCounts("c must be positive".into()));
    }
    let bq = 2.0 * delta_p * co.c + co.d;
    let cq = delta_p * delta_p * (co.c - co.a) + delta_p * (co.d - co.b);
    let disc = bq * bq - 4.0 * co.c * cq;
    if disc < 0.0 {
        return Err(OracleError::NegativeDiscriminant(disc));
    }
    let root = (-bq + disc.sqrt()) / (2.0 * co.c);
    // the constant term is zero exactly when the classes are symmetric
    Ok(if cq == 0.0 { 0.0 } else { root })
}

pub fn delta_diff_lim(cfg: &AppendixConfig) -> Result<f64, OracleError> {
    cfg.require_m_le_n()?;
    delta_diff_lim_from(&parabola_coefficients(cfg)?, cfg.delta_p)
}
