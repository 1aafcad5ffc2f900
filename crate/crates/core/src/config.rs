//! JSON run configuration shared by the CLI subcommands.
//!
//! Precedence: command-line flags > config file > defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alm::{AlmConfig, ValMetric};
use crate::data::{
    apply_profile, gen_gaussians, load_csv, long_tailed_profile, split_seed, subsample_to_ratio, Covariance,
    DataError, Dataset,
};
use crate::experiments::{GridSpec, ModelSpec};
use crate::losses::LossKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Gaussian classes; `ratio` subsamples `minority` to 1:ratio of the largest other class.
    Gaussian {
        n_per_class: Vec<usize>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Covariance>,
        #[serde(default)]
        ratio: Option<f64>,
        #[serde(default)]
        minority: Option<usize>,
        test_per_class: Vec<usize>,
    },
    /// Long-tailed Gaussian classes with means on a circle.
    LongTailed {
        num_classes: usize,
        base_count: usize,
        imbalance: f64,
        radius: f64,
        test_per_class: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetSource {
    /// The two-Gaussian 1:100 binary task.
    pub fn default_binary() -> Self {
        DatasetSource::Gaussian {
            n_per_class: vec![4500, 4500],
            means: vec![vec![0.0, 0.0], vec![1.5, 1.5]],
            covariances: vec![Covariance::Diagonal(vec![1.0, 1.0]); 2],
            ratio: Some(100.0),
            minority: Some(1),
            test_per_class: vec![1000, 1000],
        }
    }
}

/// Training pool and held-out test set.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub pool: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub dataset: DatasetSource,
    pub loss: LossKind,
    pub alm: AlmConfig,
    pub model: ModelSpec,
    pub grid: Option<GridSpec>,
    pub ensemble_k: usize,
    pub train_fraction: f64,
    pub out: PathBuf,
    pub seed: u64,
    /// Training-run cap for grid search.
    pub budget: Option<usize>,
    /// Critical classes for multi-class data; the smallest class when absent.
    pub critical: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Binary,
            dataset: DatasetSource::default_binary(),
            loss: LossKind::Bce,
            alm: AlmConfig::default(),
            model: ModelSpec::default(),
            grid: None,
            ensemble_k: 10,
            train_fraction: 0.8,
            out: PathBuf::from("results"),
            seed: 0,
            budget: None,
            critical: None,
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    /// Applies flags and copies the run seed into the training config.
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.alm.seed = self.seed;
        // multi-class runs are selected on accuracy
        if self.task == Task::Multiclass {
            self.alm.val_metric = ValMetric::Accuracy;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.alm.validate().map_err(|e| field("alm", e.to_string()))?;
        if self.model.hidden.contains(&0) {
            return Err(field("model.hidden", "layer widths must be positive"));
        }
        if self.ensemble_k == 0 {
            return Err(field("ensemble_k", "must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(field("train_fraction", "must lie in (0, 1)"));
        }
        if let Some(g) = &self.grid {
            g.validate().map_err(|e| field("grid", e.to_string()))?;
        }
        let multiclass_loss = matches!(self.loss, LossKind::Ce | LossKind::CbCe { .. });
        let binary_loss = matches!(
            self.loss,
            LossKind::Bce | LossKind::Wbce { .. } | LossKind::CbBce { .. } | LossKind::Mbauc { .. }
        );
        match self.task {
            Task::Binary if multiclass_loss => {
                return Err(field("loss", format!("`{}` needs a multi-class task", self.loss.name())))
            }
            Task::Multiclass if binary_loss => {
                return Err(field("loss", format!("`{}` needs a binary task", self.loss.name())))
            }
            _ => {}
        }
        if self.task == Task::Binary && self.critical.is_some() {
            return Err(field("critical", "binary tasks always use class 1 as positive"));
        }
        if let Some(c) = &self.critical {
            if c.is_empty() {
                return Err(field("critical", "must name at least one class"));
            }
        }
        match &self.dataset {
            DatasetSource::Gaussian {
                n_per_class,
                means,
                covariances,
                ratio,
                minority,
                test_per_class,
            } => {
                let classes = n_per_class.len();
                if means.len() != classes || covariances.len() != classes || test_per_class.len() != classes {
                    return Err(field(
                        "dataset",
                        "n_per_class, means, covariances and test_per_class need one entry per class",
                    ));
                }
                self.check_classes(classes)?;
                if let Some(r) = ratio {
                    if !(r.is_finite() && *r >= 1.0) {
                        return Err(field("dataset.ratio", "must be a finite value >= 1"));
                    }
                }
                if let Some(m) = minority {
                    if *m >= classes {
                        return Err(field("dataset.minority", format!("class {m} out of range")));
                    }
                }
            }
            DatasetSource::LongTailed {
                num_classes,
                imbalance,
                radius,
                ..
            } => {
                self.check_classes(*num_classes)?;
                if !(imbalance.is_finite() && *imbalance >= 1.0) {
                    return Err(field("dataset.imbalance", "must be a finite value >= 1"));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(field("dataset.radius", "must be positive"));
                }
            }
            DatasetSource::Csv { .. } => {}
        }
        Ok(())
    }

    fn check_classes(&self, classes: usize) -> Result<(), ConfigError> {
        match self.task {
            Task::Binary if classes != 2 => Err(field("dataset", format!("binary task needs 2 classes, got {classes}"))),
            Task::Multiclass if classes < 3 => {
                Err(field("dataset", format!("multi-class task needs at least 3 classes, got {classes}")))
            }
            _ => {
                if let Some(c) = self.critical.iter().flatten().find(|&&c| c >= classes) {
                    return Err(field("critical", format!("class {c} out of range for {classes} classes")));
                }
                Ok(())
            }
        }
    }

    fn critical_set(&self, data: &Dataset) -> Result<Dataset, ConfigError> {
        match &self.critical {
            Some(c) => Ok(data.clone().with_critical(c.iter().copied().collect::<BTreeSet<_>>())?),
            None => Ok(data.clone()),
        }
    }

    /// Builds the training pool and test set. Generated data depends only on
    /// the dataset section and the run seed.
    pub fn load_data(&self) -> Result<TaskData, ConfigError> {
        let train_seed = split_seed(self.seed, 0x7472);
        let test_seed = split_seed(self.seed, 0x7465);
        let (pool, test) = match &self.dataset {
            DatasetSource::Gaussian {
                n_per_class,
                means,
                covariances,
                ratio,
                minority,
                test_per_class,
            } => {
                let full = gen_gaussians(n_per_class, means, covariances, train_seed)?;
                let pool = match ratio {
                    Some(r) => {
                        let m = minority.unwrap_or(n_per_class.len() - 1);
                        subsample_to_ratio(&full, m, *r, split_seed(self.seed, 0x7375))?
                    }
                    None => full,
                };
                let test = gen_gaussians(test_per_class, means, covariances, test_seed)?;
                (pool, test)
            }
            DatasetSource::LongTailed {
                num_classes,
                base_count,
                imbalance,
                radius,
                test_per_class,
            } => {
                let counts = long_tailed_profile(*base_count, *num_classes, *imbalance)?;
                let means: Vec<Vec<f64>> = (0..*num_classes)
                    .map(|c| {
                        let a = std::f64::consts::TAU * c as f64 / *num_classes as f64;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect();
                let covs = vec![Covariance::Diagonal(vec![1.0, 1.0]); *num_classes];
                let base = gen_gaussians(&vec![*base_count; *num_classes], &means, &covs, train_seed)?;
                let pool = apply_profile(&base, &counts, split_seed(self.seed, 0x7375))?;
                let test = gen_gaussians(&vec![*test_per_class; *num_classes], &means, &covs, test_seed)?;
                let test = test.with_critical(pool.critical_classes().clone())?;
                (pool, test)
            }
            DatasetSource::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
        };
        let pool = self.critical_set(&pool)?;
        let test = self.critical_set(&test)?;
        let expected = match self.task {
            Task::Binary => pool.num_classes() == 2,
            Task::Multiclass => pool.num_classes() >= 3,
        };
        if !expected || pool.num_classes() != test.num_classes() {
            return Err(field(
                "dataset",
                format!(
                    "task {:?} does not match data with {} training and {} test classes",
                    self.task,
                    pool.num_classes(),
                    test.num_classes()
                ),
            ));
        }
        Ok(TaskData { pool, test })
    }

    /// Majority over minority count of the pool, used by weighted-BCE grids.
    pub fn imbalance(data: &Dataset) -> f64 {
        let counts = data.class_counts();
        let max = counts.iter().copied().max().unwrap_or(1) as f64;
        let min = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(1) as f64;
        max / min
    }

    pub fn grid_or_default(&self, pool: &Dataset) -> GridSpec {
        self.grid
            .clone()
            .unwrap_or_else(|| GridSpec::for_task(self.loss, self.task == Task::Multiclass, Self::imbalance(pool)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            dataset: DatasetSource::Gaussian {
                n_per_class: vec![200, 200],
                means: vec![vec![0.0, 0.0], vec![1.5, 1.5]],
                covariances: vec![Covariance::Diagonal(vec![1.0, 1.0]); 2],
                ratio: Some(10.0),
                minority: None,
                test_per_class: vec![50, 50],
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text, Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
        let sparse = RunConfig::from_json(r#"{"seed": 7, "loss": {"kind": "s_ml", "m": 2.0}}"#, Path::new("x")).unwrap();
        assert_eq!(sparse.seed, 7);
        assert_eq!(sparse.model.hidden, vec![32, 32]);
    }

    #[test]
    fn flags_override_config() {
        let cfg = RunConfig { seed: 3, ..small() };
        let o = Overrides {
            seed: Some(9),
            out: Some("elsewhere".into()),
        };
        let cfg = cfg.with_overrides(&o);
        assert_eq!((cfg.seed, cfg.alm.seed), (9, 9));
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn field_level_errors() {
        let bad = RunConfig { ensemble_k: 0, ..small() };
        assert!(bad.validate().unwrap_err().to_string().contains("ensemble_k"));
        let bad = RunConfig { loss: LossKind::Ce, ..small() };
        assert!(bad.validate().unwrap_err().to_string().contains("`loss`"));
        let bad = RunConfig { task: Task::Multiclass, loss: LossKind::Ce, ..small() };
        assert!(bad.validate().unwrap_err().to_string().contains("at least 3 classes"));
        let err = RunConfig::from_json(r#"{"sed": 1}"#, Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn data_is_deterministic() {
        let cfg = small();
        let a = cfg.load_data().unwrap();
        let b = cfg.load_data().unwrap();
        assert_eq!(a.pool.class_counts(), &[200, 20]);
        assert_eq!(a.pool.features(), b.pool.features());
        assert_eq!(a.test.class_counts(), &[50, 50]);
    }

    #[test]
    fn long_tailed_source() {
        let cfg = RunConfig {
            task: Task::Multiclass,
            loss: LossKind::Ce,
            dataset: DatasetSource::LongTailed {
                num_classes: 4,
                base_count: 100,
                imbalance: 10.0,
                radius: 2.0,
                test_per_class: 20,
            },
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        let d = cfg.load_data().unwrap();
        assert_eq!(d.pool.class_counts().last(), Some(&10));
        assert_eq!(d.pool.critical_classes(), d.test.critical_classes());
        assert!(d.pool.critical_classes().contains(&3));
    }
}
