//! Training pools and test sets.
//!
//! A [`Dataset`] is an ordered, immutable list of examples: the position of an
//! example is its identity, and data weights are indexed by it.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Real(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: Target,
}

impl Example {
    pub fn regression(features: Vec<f64>, y: f64) -> Self {
        Example {
            features,
            target: Target::Real(y),
        }
    }

    pub fn class(features: Vec<f64>, class: usize) -> Self {
        Example {
            features,
            target: Target::Class(class),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Arc<[Example]>,
    feature_dim: usize,
    task: TaskKind,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, task: TaskKind) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Data("dataset must contain at least one example".into()))?;
        let feature_dim = first.features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    ex.features.len()
                )));
            }
            if !ex.features.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("example {i} has non-finite features")));
            }
            match (task, ex.target) {
                (TaskKind::Regression, Target::Real(y)) if y.is_finite() => {}
                (TaskKind::Classification { classes }, Target::Class(c)) if c < classes => {}
                _ => {
                    return Err(Error::Data(format!(
                        "example {i} target {:?} does not fit task {task:?}",
                        ex.target
                    )))
                }
            }
        }
        if let TaskKind::Classification { classes } = task {
            if classes < 2 {
                return Err(Error::Data("classification needs at least 2 classes".into()));
            }
        }
        Ok(Dataset {
            examples: examples.into(),
            feature_dim,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    /// Reads a CSV with a header row: feature columns first, target last.
    pub fn from_csv(path: &Path, task: TaskKind) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut examples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                return Err(Error::Data(format!(
                    "{}: row {} needs at least one feature and a target",
                    path.display(),
                    row + 2
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::Data(format!("{}: row {}: {e}", path.display(), row + 2))
                })
            };
            let features = record
                .iter()
                .take(record.len() - 1)
                .map(parse)
                .collect::<Result<Vec<_>>>()?;
            let last = &record[record.len() - 1];
            let target = match task {
                TaskKind::Regression => Target::Real(parse(last)?),
                TaskKind::Classification { .. } => {
                    Target::Class(last.trim().parse::<usize>().map_err(|e| {
                        Error::Data(format!("{}: row {}: class index: {e}", path.display(), row + 2))
                    })?)
                }
            };
            examples.push(Example { features, target });
        }
        Dataset::new(examples, task)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.feature_dim).map(|j| format!("x{j}")).collect();
        header.push("target".into());
        writer.write_record(&header)?;
        for ex in self.examples.iter() {
            let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(match ex.target {
                Target::Real(y) => format!("{y:?}"),
                Target::Class(c) => c.to_string(),
            });
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Named synthetic generators. Generator id, size and seed fully determine the
/// dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// `y = x . beta + noise * e`, with `x ~ N(0, I)` and a seed-derived `beta`.
    LinearRegression,
    /// Gaussian blobs around `classes` seed-derived centres.
    Blobs,
    /// The two interleaved half-circles, in 2 dimensions.
    Moons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub seed: u64,
}

fn default_dim() -> usize {
    2
}
fn default_noise() -> f64 {
    0.1
}
fn default_classes() -> usize {
    2
}

impl SyntheticSpec {
    /// Draws `n` examples. Drawing a larger `n` with the same seed extends the
    /// smaller draw, so train/test splits can be taken as prefix/suffix.
    pub fn generate(&self) -> Result<Dataset> {
        if self.n == 0 {
            return Err(Error::Data("synthetic dataset needs n >= 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Data("noise must be finite and non-negative".into()));
        }
        // Stream 0 draws the problem itself (coefficients, centres); stream 1
        // draws the examples.
        let mut problem_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        match self.generator {
            Generator::LinearRegression => {
                if self.dim == 0 {
                    return Err(Error::Data("dim must be >= 1".into()));
                }
                let beta: Vec<f64> = (0..self.dim)
                    .map(|_| problem_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let examples = (0..self.n)
                    .map(|_| {
                        let x: Vec<f64> = (0..self.dim)
                            .map(|_| rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let e: f64 = rng.sample(StandardNormal);
                        let y = crate::linalg::dot(&x, &beta) + self.noise * e;
                        Example::regression(x, y)
                    })
                    .collect();
                Dataset::new(examples, TaskKind::Regression)
            }
            Generator::Blobs => {
                if self.dim == 0 || self.classes < 2 {
                    return Err(Error::Data("blobs need dim >= 1 and classes >= 2".into()));
                }
                let centres: Vec<Vec<f64>> = (0..self.classes)
                    .map(|_| {
                        (0..self.dim)
                            .map(|_| problem_rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let examples = (0..self.n)
                    .map(|_| {
                        let c = rng.random_range(0..self.classes);
                        let x = centres[c]
                            .iter()
                            .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        Example::class(x, c)
                    })
                    .collect();
                Dataset::new(examples, TaskKind::Classification { classes: self.classes })
            }
            Generator::Moons => {
                let examples = (0..self.n)
                    .map(|_| {
                        let c = rng.random_range(0..2usize);
                        let a = rng.random::<f64>() * std::f64::consts::PI;
                        let (x0, x1) = if c == 0 {
                            (a.cos(), a.sin())
                        } else {
                            (1.0 - a.cos(), 0.5 - a.sin())
                        };
                        let n0: f64 = rng.sample(StandardNormal);
                        let n1: f64 = rng.sample(StandardNormal);
                        Example::class(vec![x0 + self.noise * n0, x1 + self.noise * n1], c)
                    })
                    .collect();
                Dataset::new(examples, TaskKind::Classification { classes: 2 })
            }
        }
    }
}

/// Splits a generated pool into the first `train` examples and the rest.
pub fn split(ds: &Dataset, train: usize) -> Result<(Dataset, Dataset)> {
    if train == 0 || train >= ds.len() {
        return Err(Error::Data(format!(
            "cannot split {} examples into {train} train and a non-empty remainder",
            ds.len()
        )));
    }
    let (a, b) = ds.examples().split_at(train);
    Ok((
        Dataset::new(a.to_vec(), ds.task())?,
        Dataset::new(b.to_vec(), ds.task())?,
    ))
}
