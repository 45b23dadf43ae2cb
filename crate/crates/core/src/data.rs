//! Datasets, feature standardization and the synthetic generators used in
//! place of image benchmarks.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Regression => "regression",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => {
                Targets::Classes { labels: indices.iter().map(|&i| labels[i]).collect(), num_classes: *num_classes }
            }
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    targets: Targets,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::validation(format!("{} feature rows but {} targets", features.len(), targets.len())));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|row| row.len() != first.len()) {
                return Err(Error::validation("feature rows have differing lengths"));
            }
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite feature value"));
        }
        match &targets {
            Targets::Classes { labels, num_classes } => {
                if *num_classes < 2 {
                    return Err(Error::validation("classification needs at least 2 classes"));
                }
                if let Some(l) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::validation(format!("label {l} >= {num_classes} classes")));
                }
            }
            Targets::Values(v) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::validation("non-finite regression target"));
                }
            }
        }
        Ok(Dataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> Task {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Task::Classification { num_classes: *num_classes },
            Targets::Values(_) => Task::Regression,
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Ok(labels),
            Targets::Values(_) => Err(Error::TaskMismatch { expected: "classification", found: "regression" }),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match &self.targets {
            Targets::Values(v) => Ok(v),
            Targets::Classes { .. } => Err(Error::TaskMismatch { expected: "regression", found: "classification" }),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            targets: self.targets.subset(indices),
        }
    }

    /// Loads a headered numeric CSV whose last column is the target. For
    /// classification the target must be a non-negative integer label.
    pub fn from_csv(path: &Path, task: Task) -> Result<Dataset> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parsed: Vec<f64> = record
                .iter()
                .map(|field| {
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: {field:?} is not a number", line + 2)))
                })
                .collect::<Result<_>>()?;
            let (target, row) =
                parsed.split_last().ok_or_else(|| Error::Parse(format!("row {} is empty", line + 2)))?;
            features.push(row.to_vec());
            targets.push(*target);
        }
        let targets = match task {
            Task::Regression => Targets::Values(targets),
            Task::Classification { num_classes } => Targets::Classes {
                labels: targets
                    .iter()
                    .map(|&t| {
                        if t >= 0.0 && t.fract() == 0.0 {
                            Ok(t as usize)
                        } else {
                            Err(Error::Parse(format!("class label {t} is not a non-negative integer")))
                        }
                    })
                    .collect::<Result<_>>()?,
                num_classes,
            },
        };
        Dataset::new(features, targets)
    }
}

/// Per-feature affine map to zero mean and unit variance, fitted on one
/// split and applied to the others. Constant features are only centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("cannot standardize an empty dataset"));
        }
        let n = data.len() as f64;
        let dim = data.dim();
        let mut mean = vec![0.0; dim];
        for row in data.features() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in data.features() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let features = data
            .features()
            .iter()
            .map(|row| row.iter().zip(self.mean.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();
        Dataset { features, targets: data.targets.clone() }
    }
}

/// Gaussian blobs: class means drawn once per seed, isotropic noise within
/// each class, balanced labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticClassification {
    pub num_classes: usize,
    pub dim: usize,
    /// Scale of the class-mean cloud.
    pub separation: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    pub pool_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticClassification {
    fn default() -> Self {
        SyntheticClassification {
            num_classes: 10,
            dim: 20,
            separation: 1.0,
            sigma: 3.0,
            pool_size: 6000,
            test_size: 2000,
        }
    }
}

impl SyntheticClassification {
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed, 0xC1A5);
        let normal = Normal::new(0.0, self.separation).expect("separation must be positive");
        (0..self.num_classes).map(|_| (0..self.dim).map(|_| normal.sample(&mut rng)).collect()).collect()
    }

    /// `n` draws from the class-balanced generator behind `seed`, using `stream`
    /// to keep independent draws apart.
    pub fn sample(&self, seed: u64, stream: u64, n: usize) -> Result<Dataset> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.num_classes < 2 || self.dim == 0 || !positive(self.sigma) || !positive(self.separation) {
            return Err(Error::validation("invalid synthetic classification parameters"));
        }
        let means = self.class_means(seed);
        let mut rng = seeded(seed, 0xC1A5_0000 + stream);
        let noise = Normal::new(0.0, self.sigma).expect("sigma checked above");
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..self.num_classes);
            features.push(means[class].iter().map(|m| m + noise.sample(&mut rng)).collect());
            labels.push(class);
        }
        Dataset::new(features, Targets::Classes { labels, num_classes: self.num_classes })
    }

    /// Training/calibration pool and an independent global test set.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        Ok((self.sample(seed, 1, self.pool_size)?, self.sample(seed, 2, self.test_size)?))
    }
}

/// `y = w·x + ε · (0.5 + ‖x‖ / √d)` with Gaussian `x` and `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRegression {
    pub dim: usize,
    pub noise: f64,
    pub pool_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticRegression {
    fn default() -> Self {
        SyntheticRegression { dim: 8, noise: 1.0, pool_size: 6000, test_size: 2000 }
    }
}

impl SyntheticRegression {
    pub fn sample(&self, seed: u64, stream: u64, n: usize) -> Result<Dataset> {
        if self.dim == 0 || !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::validation("invalid synthetic regression parameters"));
        }
        let mut coef_rng = seeded(seed, 0x5E6);
        let w: Vec<f64> = (0..self.dim).map(|_| coef_rng.random_range(-1.0..1.0)).collect();
        let mut rng = seeded(seed, 0x5E6_0000 + stream);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let sqrt_d = (self.dim as f64).sqrt();
        let mut features = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..self.dim).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let signal: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let eps = self.noise * std_normal.sample(&mut rng) * (0.5 + norm / sqrt_d);
            features.push(x);
            values.push(signal + eps);
        }
        Dataset::new(features, Targets::Values(values))
    }

    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        Ok((self.sample(seed, 1, self.pool_size)?, self.sample(seed, 2, self.test_size)?))
    }
}
