//! Augmented-Lagrangian AUC constraint training for class-imbalanced
//! classification.
//!
//! The crate trains small multilayer perceptrons under a per-positive ranking
//! constraint `q_j = sum_k max(0, f(n_k) - f(p_j) + delta)`, maintained with
//! per-sample Lagrange multipliers and a growing quadratic penalty.

pub mod alm;
pub mod config;
pub mod constraint;
pub mod data;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod oracle;

use thiserror::Error;

/// Umbrella error for callers that mix modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Net(#[from] netcore::NetError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Constraint(#[from] constraint::ConstraintError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Alm(#[from] alm::AlmError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
