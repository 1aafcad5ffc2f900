//! Labeled datasets, synthetic generators and CSV persistence.
//!
//! All generators are pure functions of their parameters and seed. Counts
//! derived from ratios are rounded half-up.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid covariance for component {component}: {reason}")]
    InvalidCovariance { component: usize, reason: String },
    #[error("ratio 1:{ratio} unachievable: {reason}")]
    RatioUnachievable { ratio: f64, reason: String },
    #[error("class {class} has {count} samples, too few to stratify")]
    ClassTooSmall { class: usize, count: usize },
    #[error("{path}: line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path}: file is empty")]
    EmptyFile { path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labeled samples with stable ids and a designated critical class set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    class_counts: Vec<usize>,
    critical: BTreeSet<usize>,
}

/// JSON sidecar with class metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub critical_classes: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Dataset {
    /// Validates ids, labels and the critical set.
    pub fn new(samples: Vec<Sample>, num_classes: usize, critical: BTreeSet<usize>) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::Invalid(format!("need at least two classes, got {num_classes}")));
        }
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut ids = BTreeSet::new();
        let mut class_counts = vec![0; num_classes];
        for s in &samples {
            if !ids.insert(s.id) {
                return Err(DataError::Invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.label >= num_classes {
                return Err(DataError::Invalid(format!(
                    "sample {} has label {} but there are {num_classes} classes",
                    s.id, s.label
                )));
            }
            if s.features.len() != dim {
                return Err(DataError::Invalid(format!(
                    "sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("sample {} has a non-finite feature", s.id)));
            }
            class_counts[s.label] += 1;
        }
        if critical.is_empty() || critical.len() >= num_classes {
            return Err(DataError::Invalid(
                "critical classes must be a non-empty strict subset of the classes".into(),
            ));
        }
        if let Some(&c) = critical.iter().find(|&&c| c >= num_classes) {
            return Err(DataError::Invalid(format!("critical class {c} out of range")));
        }
        Ok(Self {
            samples,
            num_classes,
            class_counts,
            critical,
        })
    }

    /// Binary dataset with class 1 as the critical class.
    pub fn binary(samples: Vec<Sample>) -> Result<Self, DataError> {
        Self::new(samples, 2, [1].into())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn critical_classes(&self) -> &BTreeSet<usize> {
        &self.critical
    }

    pub fn is_critical(&self, label: usize) -> bool {
        self.critical.contains(&label)
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn with_critical(mut self, critical: BTreeSet<usize>) -> Result<Self, DataError> {
        let samples = std::mem::take(&mut self.samples);
        Self::new(samples, self.num_classes, critical)
    }

    pub fn features(&self) -> Matrix {
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(self.len() * dim);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Matrix::from_vec(self.len(), dim, data).expect("features are rectangular")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.num_classes, self.critical.clone())
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    pub fn meta(&self, seed: Option<u64>) -> DatasetMeta {
        DatasetMeta {
            num_classes: self.num_classes,
            class_counts: self.class_counts.clone(),
            critical_classes: self.critical.iter().copied().collect(),
            seed,
        }
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Covariance of one Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    /// Lower-triangular Cholesky factor, row-major `d x d`.
    fn cholesky(&self, dim: usize, component: usize) -> Result<Vec<f64>, DataError> {
        let err = |reason: String| DataError::InvalidCovariance { component, reason };
        let mut l = vec![0.0; dim * dim];
        match self {
            Covariance::Diagonal(d) => {
                if d.len() != dim {
                    return Err(err(format!("{} variances for dimension {dim}", d.len())));
                }
                for (i, &v) in d.iter().enumerate() {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(err(format!("variance {v} is not positive")));
                    }
                    l[i * dim + i] = v.sqrt();
                }
            }
            Covariance::Full(m) => {
                if m.len() != dim || m.iter().any(|r| r.len() != dim) {
                    return Err(err(format!("matrix is not {dim}x{dim}")));
                }
                for (i, row) in m.iter().enumerate() {
                    for (j, &x) in row.iter().enumerate() {
                        if (x - m[j][i]).abs() > 1e-12 * (1.0 + x.abs()) {
                            return Err(err("matrix is not symmetric".into()));
                        }
                    }
                }
                for i in 0..dim {
                    for j in 0..=i {
                        let mut s = m[i][j];
                        for k in 0..j {
                            s -= l[i * dim + k] * l[j * dim + k];
                        }
                        if i == j {
                            if s.is_nan() || s <= 0.0 {
                                return Err(err("matrix is not positive definite".into()));
                            }
                            l[i * dim + i] = s.sqrt();
                        } else {
                            l[i * dim + j] = s / l[j * dim + j];
                        }
                    }
                }
            }
        }
        Ok(l)
    }
}

/// Draws `n_per_class[c]` points from `N(means[c], covariances[c])`, labels by
/// component, ids `0..n`. Class 1 is critical for two components; otherwise the
/// smallest class (last on ties) is.
pub fn gen_gaussians(
    n_per_class: &[usize],
    means: &[Vec<f64>],
    covariances: &[Covariance],
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_per_class.len() != means.len() || means.len() != covariances.len() {
        return Err(DataError::Invalid("counts, means and covariances must have equal length".into()));
    }
    let dim = means.first().map_or(0, Vec::len);
    if dim == 0 || means.iter().any(|m| m.len() != dim) {
        return Err(DataError::Invalid("means must share a non-zero dimension".into()));
    }
    let factors = covariances
        .iter()
        .enumerate()
        .map(|(c, cov)| cov.cholesky(dim, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_per_class.iter().sum());
    let mut id = 0u64;
    let mut z = vec![0.0; dim];
    for (c, &n) in n_per_class.iter().enumerate() {
        let l = &factors[c];
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let features = (0..dim)
                .map(|i| means[c][i] + (0..=i).map(|k| l[i * dim + k] * z[k]).sum::<f64>())
                .collect();
            samples.push(Sample { id, features, label: c });
            id += 1;
        }
    }
    let critical = default_critical(n_per_class);
    Dataset::new(samples, n_per_class.len(), critical)
}

fn default_critical(counts: &[usize]) -> BTreeSet<usize> {
    if counts.len() == 2 {
        return [1].into();
    }
    [smallest_class(counts)].into()
}

fn smallest_class(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n <= counts[best] {
            best = c;
        }
    }
    best
}

/// Keeps `round(majority / ratio)` randomly chosen samples of `minority`;
/// every other class and all feature values are untouched. The majority is
/// the largest other class.
pub fn subsample_to_ratio(dataset: &Dataset, minority: usize, ratio: f64, seed: u64) -> Result<Dataset, DataError> {
    if minority >= dataset.num_classes() {
        return Err(DataError::Invalid(format!("class {minority} out of range")));
    }
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(DataError::RatioUnachievable {
            ratio,
            reason: "ratio must be >= 1".into(),
        });
    }
    let majority = dataset
        .class_counts()
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != minority)
        .map(|(_, &n)| n)
        .max()
        .unwrap_or(0);
    let target = round_half_up(majority as f64 / ratio);
    let have = dataset.class_counts()[minority];
    if target == 0 {
        return Err(DataError::RatioUnachievable {
            ratio,
            reason: format!("majority {majority} gives zero minority samples"),
        });
    }
    if target > have {
        return Err(DataError::RatioUnachievable {
            ratio,
            reason: format!("needs {target} minority samples, only {have} available"),
        });
    }
    let mut minority_rows = dataset.indices_by_class().swap_remove(minority);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    minority_rows.shuffle(&mut rng);
    let keep: BTreeSet<usize> = minority_rows[..target].iter().copied().collect();
    let rows: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples()[i].label != minority || keep.contains(&i))
        .collect();
    dataset.subset(&rows)
}

/// `n_c = round(base * I^(-c / (C - 1)))` for `c = 0..C`.
pub fn long_tailed_profile(base: usize, num_classes: usize, imbalance: f64) -> Result<Vec<usize>, DataError> {
    if num_classes < 2 {
        return Err(DataError::Invalid("long-tailed profile needs at least two classes".into()));
    }
    if !(imbalance.is_finite() && imbalance >= 1.0) {
        return Err(DataError::Invalid(format!("imbalance must be >= 1, got {imbalance}")));
    }
    let last = (num_classes - 1) as f64;
    let counts: Vec<usize> = (0..num_classes)
        .map(|c| round_half_up(base as f64 * imbalance.powf(-(c as f64) / last)))
        .collect();
    if let Some(c) = counts.iter().position(|&n| n < 1) {
        return Err(DataError::Invalid(format!("class {c} would have no samples")));
    }
    Ok(counts)
}

/// Subsamples each class down to `counts[c]` (seeded); the smallest class
/// becomes the critical class.
pub fn apply_profile(dataset: &Dataset, counts: &[usize], seed: u64) -> Result<Dataset, DataError> {
    if counts.len() != dataset.num_classes() {
        return Err(DataError::Invalid("profile length differs from class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for (c, mut rows) in dataset.indices_by_class().into_iter().enumerate() {
        if counts[c] > rows.len() {
            return Err(DataError::Invalid(format!(
                "class {c} needs {} samples, has {}",
                counts[c],
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        keep.extend(rows[..counts[c]].iter().copied());
    }
    let rows: Vec<usize> = keep.into_iter().collect();
    let critical: BTreeSet<usize> = [smallest_class(counts)].into();
    dataset.subset(&rows)?.with_critical(critical)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
}

/// Per-split seed derived from a base seed and split index.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `k` independent stratified train/validation splits. Class `c` puts
/// `round(n_c * fraction)` samples in train; both parts must be non-empty for
/// every class. Sample order inside each part follows the original order.
pub fn stratified_splits(dataset: &Dataset, k: usize, fraction: f64, seed: u64) -> Result<Vec<Split>, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let by_class = dataset.indices_by_class();
    let mut sizes = Vec::with_capacity(by_class.len());
    for (c, rows) in by_class.iter().enumerate() {
        let n_train = round_half_up(rows.len() as f64 * fraction);
        if n_train == 0 || n_train >= rows.len() {
            return Err(DataError::ClassTooSmall {
                class: c,
                count: rows.len(),
            });
        }
        sizes.push(n_train);
    }
    (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, i));
            let mut train = BTreeSet::new();
            for (rows, &n_train) in by_class.iter().zip(&sizes) {
                let mut rows = rows.clone();
                rows.shuffle(&mut rng);
                train.extend(rows[..n_train].iter().copied());
            }
            let train_rows: Vec<usize> = train.iter().copied().collect();
            let val_rows: Vec<usize> = (0..dataset.len()).filter(|i| !train.contains(i)).collect();
            Ok(Split {
                train: dataset.subset(&train_rows)?,
                validation: dataset.subset(&val_rows)?,
            })
        })
        .collect()
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `id,label,f0..f{d-1}` plus a `<path>.meta.json` sidecar.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dataset.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in dataset.samples() {
        let mut rec = vec![s.id.to_string(), s.label.to_string()];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(meta_path(path), serde_json::to_string_pretty(&dataset.meta(None))?)?;
    Ok(())
}

/// Reads a dataset written by [`save_csv`] (or any file with the same header).
/// Without a sidecar, the class count is inferred from the labels and the
/// smallest class becomes critical.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(DataError::EmptyFile { path: name });
    }
    let malformed = |line: usize, reason: String| DataError::Malformed {
        path: name.clone(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| DataError::EmptyFile { path: name.clone() })?
        .map_err(|e| malformed(1, e.to_string()))?;
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
        return Err(malformed(1, "header must start with `id,label`".into()));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(malformed(1, format!("expected column `f{i}`, found `{c}`")));
        }
    }
    let dim = cols.len() - 2;
    let mut samples = Vec::new();
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != cols.len() {
            return Err(malformed(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let id = rec[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| malformed(line, format!("id: {e}")))?;
        let label = rec[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| malformed(line, format!("label: {e}")))?;
        let mut features = Vec::with_capacity(dim);
        for (i, field) in rec.iter().skip(2).enumerate() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| malformed(line, format!("f{i}: {e}")))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("f{i}: non-finite value `{field}`")));
            }
            features.push(v);
        }
        samples.push(Sample { id, features, label });
    }
    if samples.is_empty() {
        return Err(malformed(2, "no data rows".into()));
    }
    let meta_file = meta_path(path);
    let (num_classes, critical) = if meta_file.exists() {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_file)?)?;
        (meta.num_classes, meta.critical_classes.into_iter().collect())
    } else {
        let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        let mut counts = vec![0; classes.max(2)];
        for s in &samples {
            counts[s.label] += 1;
        }
        (counts.len(), default_critical(&counts))
    };
    Dataset::new(samples, num_classes, critical)
}
