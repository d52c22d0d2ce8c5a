//! The deterministic learning algorithm `A(w)`.
//!
//! A [`TrainPlan`] fixes everything except the data weights: dataset, model,
//! update rule, batch schedule, initialization seed and step count. Training
//! the same plan with the same weights is bit-reproducible, and the batch
//! schedule never depends on the weights: an example with weight zero still
//! occupies its slot in every batch it was assigned to.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{CheckpointStore, RetentionPolicy};
use crate::data::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::linalg::axpy;
use crate::measure::MeasurementFn;
use crate::model::ModelFamily;
use crate::optim::{OptimizerState, UpdateRule};

/// Per-example loss multipliers `w`, indexed like the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWeights(pub Vec<f64>);

impl DataWeights {
    pub fn ones(n: usize) -> Self {
        DataWeights(vec![1.0; n])
    }

    /// All ones except zeros at `dropped`.
    pub fn dropping(n: usize, dropped: &[usize]) -> Self {
        let mut w = vec![1.0; n];
        for &i in dropped {
            w[i] = 0.0;
        }
        DataWeights(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_center(&self) -> bool {
        self.0.iter().all(|&v| v == 1.0)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        ensure_len("data weights", n, self.0.len())?;
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: "data weights",
            })
        }
    }
}

/// Seeded epoch-wise shuffling of a pool of example indices.
///
/// Epoch `e` is a permutation of the pool drawn from ChaCha8 stream `e` of
/// `seed`, cut into consecutive batches of `batch_size`; the final batch of an
/// epoch keeps whatever is left, so it may be short. `batch(t)` is a pure
/// function of `(seed, pool, batch_size, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    seed: u64,
    batch_size: usize,
    pool: Arc<[usize]>,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        Self::over_pool(seed, (0..n).collect(), batch_size)
    }

    /// Schedule restricted to `pool`; used when retraining on a surviving
    /// subset with freshly drawn batches.
    pub fn over_pool(seed: u64, pool: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if pool.is_empty() {
            return Err(Error::Config("batch schedule needs a non-empty pool".into()));
        }
        Ok(BatchSchedule {
            seed,
            batch_size,
            pool: pool.into(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order = self.pool.to_vec();
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, t: usize) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, k) = (t / bpe, t % bpe);
        let order = self.epoch_order(epoch);
        let end = ((k + 1) * self.batch_size).min(order.len());
        order[k * self.batch_size..end].to_vec()
    }

    /// Batches `from..to`, generating each epoch's permutation once.
    pub fn batches(&self, from: usize, to: usize) -> Vec<Vec<usize>> {
        let bpe = self.batches_per_epoch();
        let mut out = Vec::with_capacity(to.saturating_sub(from));
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for t in from..to {
            let epoch = t / bpe;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            let order = &cached.as_ref().expect("just set").1;
            let k = t % bpe;
            let end = ((k + 1) * self.batch_size).min(order.len());
            out.push(order[k * self.batch_size..end].to_vec());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub dataset: Dataset,
    pub model: ModelFamily,
    pub rule: UpdateRule,
    pub schedule: BatchSchedule,
    pub init_seed: u64,
    pub steps: usize,
    fingerprint: String,
}

#[derive(Serialize)]
struct PlanFingerprint<'a> {
    dataset: String,
    model: &'a ModelFamily,
    rule: &'a UpdateRule,
    batch_seed: u64,
    batch_size: usize,
    pool: &'a [usize],
    init_seed: u64,
    steps: usize,
}

pub fn dataset_digest(ds: &Dataset) -> String {
    let json = serde_json::to_vec(ds.examples()).expect("examples serialize");
    hex::encode(Sha256::digest(json))
}

impl TrainPlan {
    pub fn new(
        dataset: Dataset,
        model: ModelFamily,
        rule: UpdateRule,
        schedule: BatchSchedule,
        init_seed: u64,
        steps: usize,
    ) -> Result<Self> {
        model.validate(&dataset)?;
        rule.validate(steps)?;
        if let Some(&bad) = schedule.pool().iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Config(format!(
                "batch schedule index {bad} out of range for {} examples",
                dataset.len()
            )));
        }
        let fingerprint = {
            let fp = PlanFingerprint {
                dataset: dataset_digest(&dataset),
                model: &model,
                rule: &rule,
                batch_seed: schedule.seed(),
                batch_size: schedule.batch_size(),
                pool: schedule.pool(),
                init_seed,
                steps,
            };
            hex::encode(Sha256::digest(serde_json::to_vec(&fp).expect("plan serializes")))
        };
        Ok(TrainPlan {
            dataset,
            model,
            rule,
            schedule,
            init_seed,
            steps,
            fingerprint,
        })
    }

    /// Plan over `epochs` passes of a freshly seeded schedule.
    pub fn with_epochs(
        dataset: Dataset,
        model: ModelFamily,
        rule: UpdateRule,
        batch_size: usize,
        batch_seed: u64,
        init_seed: u64,
        epochs: usize,
    ) -> Result<Self> {
        let schedule = BatchSchedule::new(batch_seed, dataset.len(), batch_size)?;
        let steps = epochs * schedule.batches_per_epoch();
        TrainPlan::new(dataset, model, rule, schedule, init_seed, steps)
    }

    pub fn n(&self) -> usize {
        self.dataset.len()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn initial_state(&self) -> OptimizerState {
        self.rule.init_state(self.model.init_params(self.init_seed))
    }

    /// Same plan with a different step count (and its own fingerprint).
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        TrainPlan::new(
            self.dataset.clone(),
            self.model.clone(),
            self.rule,
            self.schedule.clone(),
            self.init_seed,
            steps,
        )
    }

    /// `g_t(s, w) = sum_{i in B_t} w_i grad l(z_i; s)`. A plain weighted sum:
    /// any per-batch normalisation belongs in the learning rate.
    pub fn weighted_grad(&self, s: &OptimizerState, w: &DataWeights, t: usize) -> Result<Vec<f64>> {
        if t >= self.steps {
            return Err(Error::Config(format!("step {t} beyond run length {}", self.steps)));
        }
        w.validate(self.n())?;
        self.weighted_grad_on(s, w, &self.schedule.batch(t), t)
    }

    pub(crate) fn weighted_grad_on(
        &self,
        s: &OptimizerState,
        w: &DataWeights,
        batch: &[usize],
        t: usize,
    ) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.model.param_dim()];
        for &i in batch {
            let gi = self
                .model
                .grad(&s.params, self.dataset.get(i))
                .map_err(|e| divergence(t, e))?;
            axpy(w.0[i], &gi, &mut g);
        }
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::Divergence {
                step: t,
                what: "non-finite minibatch gradient".into(),
            })
        }
    }

    /// Runs steps `s.step..to` from `s`.
    pub fn advance(&self, s: &OptimizerState, w: &DataWeights, to: usize) -> Result<OptimizerState> {
        let mut state = s.clone();
        self.advance_in_place(&mut state, w, to, |_| {})?;
        Ok(state)
    }

    fn advance_in_place(
        &self,
        state: &mut OptimizerState,
        w: &DataWeights,
        to: usize,
        mut observe: impl FnMut(&OptimizerState),
    ) -> Result<()> {
        if to > self.steps || state.step > to {
            return Err(Error::Config(format!(
                "cannot advance from step {} to {to} in a run of {}",
                state.step, self.steps
            )));
        }
        let batches = self.schedule.batches(state.step, to);
        for batch in batches {
            observe(state);
            let t = state.step;
            let g = self.weighted_grad_on(state, w, &batch, t)?;
            *state = self.rule.apply(state, &g)?;
        }
        Ok(())
    }

    /// `A(w) = s_T`.
    pub fn train(&self, w: &DataWeights) -> Result<OptimizerState> {
        w.validate(self.n())?;
        self.advance(&self.initial_state(), w, self.steps)
    }

    /// Trains and retains states according to `policy` for a later reverse
    /// pass.
    pub fn train_recorded(
        &self,
        w: &DataWeights,
        policy: RetentionPolicy,
    ) -> Result<(OptimizerState, CheckpointStore)> {
        w.validate(self.n())?;
        let keep = policy.retained_steps(self.steps);
        let mut store = CheckpointStore::new(policy, self, w.is_center());
        let mut state = self.initial_state();
        let mut err = None;
        self.advance_in_place(&mut state, w, self.steps, |s| {
            if keep.contains(&s.step) && err.is_none() {
                if let Err(e) = store.insert(s.clone()) {
                    err = Some(e);
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        store.set_final(state.clone())?;
        Ok((state, store))
    }

    /// `f(w) = phi(A(w))`.
    pub fn model_output(&self, phi: &MeasurementFn, w: &DataWeights) -> Result<f64> {
        let s = self.train(w)?;
        phi.measure(&self.model, &s.params)
    }

    /// Evaluates several measurements on one trained model.
    pub fn model_outputs(&self, phis: &[MeasurementFn], w: &DataWeights) -> Result<Vec<f64>> {
        let s = self.train(w)?;
        phis.iter().map(|phi| phi.measure(&self.model, &s.params)).collect()
    }
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { what } => Error::Divergence {
            step,
            what: format!("non-finite {what}"),
        },
        other => other,
    }
}
