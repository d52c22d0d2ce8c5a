//! First-order predictor, subset sampling, retraining ground truth and the
//! linear datamodeling score.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::measure::MeasurementFn;
use crate::replay::InfluenceVector;
use crate::stats::{bootstrap_ci, spearman, ConfidenceInterval};
use crate::trainer::{BatchSchedule, DataWeights, TrainPlan};

/// `f_hat(w) = f(1) + influence . (w - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorPredictor {
    pub influence: Vec<f64>,
    pub center_output: f64,
}

impl From<&InfluenceVector> for TaylorPredictor {
    fn from(v: &InfluenceVector) -> Self {
        TaylorPredictor {
            influence: v.values.clone(),
            center_output: v.center_output,
        }
    }
}

impl TaylorPredictor {
    pub fn new(influence: Vec<f64>, center_output: f64) -> Self {
        TaylorPredictor {
            influence,
            center_output,
        }
    }

    /// Coordinates with `w_i == 1` are skipped, so `predict(1)` returns
    /// the center bit for bit.
    pub fn predict(&self, w: &[f64]) -> Result<f64> {
        ensure_len("weights", self.influence.len(), w.len())?;
        let mut shift = None;
        for (b, &wi) in self.influence.iter().zip(w) {
            if wi != 1.0 {
                *shift.get_or_insert(0.0) += b * (wi - 1.0);
            }
        }
        Ok(match shift {
            Some(d) => self.center_output + d,
            None => self.center_output,
        })
    }
}

/// One random subset: `weights` is 0 on `dropped` and 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSample {
    pub weights: DataWeights,
    pub dropped: Vec<usize>,
    pub drop_fraction: f64,
    pub seed: u64,
    pub index: usize,
}

pub fn drop_count(n: usize, p: f64) -> usize {
    (p * n as f64).floor() as usize
}

/// `m` subsets of `0..n`, each dropping exactly `floor(p n)` indices drawn
/// uniformly without replacement. Subset `j` draws from its own stream of
/// the seeded generator, so it does not depend on `m`.
pub fn sample_subsets(n: usize, p: f64, m: usize, seed: u64) -> Result<Vec<SubsetSample>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("drop fraction {p} not in (0, 1)")));
    }
    let k = drop_count(n, p);
    if k == 0 {
        return Err(Error::Config(format!("drop fraction {p} drops nothing from {n} examples")));
    }
    Ok((0..m)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut dropped = index::sample(&mut rng, n, k).into_vec();
            dropped.sort_unstable();
            SubsetSample {
                weights: DataWeights::dropping(n, &dropped),
                dropped,
                drop_fraction: p,
                seed,
                index: j,
            }
        })
        .collect())
}

/// How retraining on a subset treats the batch schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainMode {
    /// The plan's schedule over all `N` indices; dropped examples ride along
    /// with weight 0. This is the function the influence vector differentiates.
    #[default]
    SameSchedule,
    /// Batches reshuffled over the survivors only, same seed, batch size and
    /// step count. A sensitivity check, not differentiable in `w`.
    ResampleSurvivors,
}

fn survivor_plan(plan: &TrainPlan, subset: &SubsetSample) -> Result<TrainPlan> {
    let survivors: Vec<usize> = (0..plan.n()).filter(|i| subset.dropped.binary_search(i).is_err()).collect();
    let schedule = BatchSchedule::over_pool(plan.schedule.seed(), survivors, plan.schedule.batch_size())?;
    TrainPlan::new(
        plan.dataset.clone(),
        plan.model.clone(),
        plan.rule,
        schedule,
        plan.init_seed,
        plan.steps,
    )
}

fn tag_subset(j: usize, e: Error) -> Error {
    match e {
        Error::Divergence { step, what } => Error::Divergence {
            step,
            what: format!("subset {j}: {what}"),
        },
        other => other,
    }
}

/// Retrained outputs, indexed `[measurement][subset]`. Subsets run in
/// parallel; results keep subset order.
pub fn ground_truth(
    plan: &TrainPlan,
    phis: &[MeasurementFn],
    subsets: &[SubsetSample],
    mode: RetrainMode,
) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = subsets
        .par_iter()
        .map(|sub| {
            let out = match mode {
                RetrainMode::SameSchedule => plan.model_outputs(phis, &sub.weights),
                RetrainMode::ResampleSurvivors => {
                    survivor_plan(plan, sub).and_then(|p| p.model_outputs(phis, &sub.weights))
                }
            };
            out.map_err(|e| tag_subset(sub.index, e))
        })
        .collect::<Result<_>>()?;
    Ok((0..phis.len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect())
}

/// Linear datamodeling score: Spearman correlation of predictions against
/// retrained outputs.
pub fn lds(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    spearman(predicted, truth)
}

/// Scores of one measurement under one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLds {
    pub measurement: String,
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    /// `None` when the correlation is undefined (no rank variance).
    pub rho: Option<f64>,
}

impl TaskLds {
    pub fn new(measurement: impl Into<String>, predicted: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        ensure_len("predictions", truth.len(), predicted.len())?;
        let rho = match lds(&predicted, &truth) {
            Ok(r) => Some(r),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(TaskLds {
            measurement: measurement.into(),
            predicted,
            truth,
            rho,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdsReport {
    pub method: String,
    pub drop_fraction: f64,
    pub subsets: usize,
    pub tasks: Vec<TaskLds>,
    /// Mean of the defined per-task correlations.
    pub mean: Option<f64>,
    /// Percentile bootstrap over subsets of the mean.
    pub ci: Option<ConfidenceInterval>,
}

fn mean_rho(tasks: &[TaskLds], idx: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for t in tasks {
        let p: Vec<f64> = idx.iter().map(|&j| t.predicted[j]).collect();
        let y: Vec<f64> = idx.iter().map(|&j| t.truth[j]).collect();
        match lds(&p, &y) {
            Ok(r) => {
                sum += r;
                count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        Err(Error::UndefinedMetric("no task has a defined LDS".into()))
    } else {
        Ok(sum / count as f64)
    }
}

impl LdsReport {
    /// All tasks must share the same `m` subsets.
    pub fn new(
        method: impl Into<String>,
        drop_fraction: f64,
        tasks: Vec<TaskLds>,
        resamples: usize,
        level: f64,
        seed: u64,
    ) -> Result<Self> {
        let m = tasks.first().map_or(0, |t| t.truth.len());
        for t in &tasks {
            ensure_len("subsets per task", m, t.truth.len())?;
        }
        let defined: Vec<f64> = tasks.iter().filter_map(|t| t.rho).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let ci = match mean {
            Some(_) => match bootstrap_ci(m, resamples, level, seed, |idx| mean_rho(&tasks, idx)) {
                Ok(ci) => Some(ci),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        Ok(LdsReport {
            method: method.into(),
            drop_fraction,
            subsets: m,
            tasks,
            mean,
            ci,
        })
    }

    pub fn undefined_tasks(&self) -> Vec<&str> {
        self.tasks
            .iter()
            .filter(|t| t.rho.is_none())
            .map(|t| t.measurement.as_str())
            .collect()
    }
}

/// `Delta(eps) = f(1 + eps e_i) - f(1)` by retraining on a grid of `eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessProbe {
    pub index: usize,
    pub center_output: f64,
    pub eps: Vec<f64>,
    /// `Err` text when training diverged at that grid point.
    pub delta: Vec<std::result::Result<f64, String>>,
}

pub fn smoothness_probe(plan: &TrainPlan, phi: &MeasurementFn, i: usize, grid: &[f64]) -> Result<SmoothnessProbe> {
    let n = plan.n();
    if i >= n {
        return Err(Error::Config(format!("probe index {i} out of range for {n} examples")));
    }
    if let Some(e) = grid.iter().find(|e| !e.is_finite()) {
        return Err(Error::Config(format!("probe grid value {e} is not finite")));
    }
    let center = plan.model_output(phi, &DataWeights::ones(n))?;
    let delta = grid
        .par_iter()
        .map(|&eps| {
            if eps == 0.0 {
                return Ok(0.0);
            }
            let mut w = DataWeights::ones(n);
            w.0[i] += eps;
            plan.model_output(phi, &w).map(|f| f - center).map_err(|e| e.to_string())
        })
        .collect();
    Ok(SmoothnessProbe {
        index: i,
        center_output: center,
        eps: grid.to_vec(),
        delta,
    })
}

impl SmoothnessProbe {
    fn delta_at(&self, eps: f64) -> Option<f64> {
        let k = self.eps.iter().position(|&e| e == eps)?;
        self.delta[k].as_ref().ok().copied()
    }

    /// `(eps, Delta(2 eps) / Delta(eps))` for every nonzero `eps` whose
    /// double is also on the grid, ordered by `|eps|`.
    pub fn doubling_ratios(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .eps
            .iter()
            .filter(|&&e| e != 0.0)
            .filter_map(|&e| Some((e, self.delta_at(2.0 * e)? / self.delta_at(e)?)))
            .collect();
        out.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
        out
    }

    /// Richardson-extrapolated slope `2 s(eps) - s(2 eps)` with
    /// `s(eps) = Delta(eps) / eps`, at the smallest paired `eps`.
    pub fn extrapolated_slope(&self) -> Option<f64> {
        let (eps, _) = *self.doubling_ratios().first()?;
        let s1 = self.delta_at(eps)? / eps;
        let s2 = self.delta_at(2.0 * eps)? / (2.0 * eps);
        Some(2.0 * s1 - s2)
    }
}
