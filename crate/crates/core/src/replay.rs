//! Exact metagradient of a model output with respect to the data weights.
//!
//! The reverse pass carries the state adjoint `Delta_t = d f / d s_t` from
//! `t = T` down to `0`. At each step, with `g_t` the minibatch gradient at
//! `w = 1`:
//!
//! * `u_t = (d h_t / d g)^T Delta_{t+1}` (the rule's gradient adjoint);
//! * every `i` in `B_t` gains `beta_i += grad l(z_i; s_t) . u_t`, because
//!   `d g_t / d w_i = grad l(z_i; s_t)`;
//! * `Delta_t = (d h_t / d s)^T Delta_{t+1} + sum_{i in B_t} H(z_i; s_t) u_t`,
//!   the second term entering the parameter block only.
//!
//! The sum of the per-step contributions is the influence vector.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{sweep_store, CheckpointStore, ReplayBudget, Sweep};
use crate::error::{Error, Result};
use crate::format::{BlockFile, BlockTag, FileKind};
use crate::linalg::{axpy, dot, CompensatedSum};
use crate::measure::MeasurementFn;
use crate::optim::{OptimizerState, StateAdjoint};
use crate::trainer::{DataWeights, TrainPlan};

/// `d f / d w` at `w = 1`, one entry per training example.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVector {
    pub values: Vec<f64>,
    /// `f(1)`, the center of the first-order expansion.
    pub center_output: f64,
    pub plan_fingerprint: String,
    pub measure_fingerprint: String,
}

impl InfluenceVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with columns `method,index,value`. Values are written with
    /// shortest round-trip formatting, so reading back is bit-exact.
    pub fn write_csv(&self, path: &Path, method: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "index", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([method, &i.to_string(), &format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `value` column of a CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv_values(path: &Path) -> Result<Vec<f64>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec[1].parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("row {row}: bad index"),
            })?;
            if idx != row {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("row {row}: index {idx} out of order"),
                });
            }
            out.push(rec[2].parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                reason: format!("row {row}: bad value"),
            })?);
        }
        Ok(out)
    }

    pub fn to_block_file(&self, steps: usize) -> BlockFile {
        BlockFile {
            kind: FileKind::Influence,
            step: steps as u64,
            blocks: vec![
                (BlockTag::Influence, self.values.clone()),
                (BlockTag::CenterOutput, vec![self.center_output]),
            ],
        }
    }
}

pub(crate) fn measure_digest(phi: &MeasurementFn) -> String {
    hex::encode(Sha256::digest(phi.fingerprint_json().as_bytes()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Accumulate `beta` with compensated summation.
    #[serde(default)]
    pub compensated: bool,
}

/// Per-sample gradients of one batch, evaluated in parallel and kept in
/// batch order.
fn batch_grads(plan: &TrainPlan, s: &OptimizerState, batch: &[usize]) -> Result<Vec<Vec<f64>>> {
    batch
        .par_iter()
        .map(|&i| plan.model.grad(&s.params, plan.dataset.get(i)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::NonFinite { what } => Error::Divergence {
                step: s.step,
                what: format!("non-finite {what}"),
            },
            other => other,
        })
}

/// Sum of the per-sample gradients in batch order. Bit-identical to the
/// training loop's aggregation at `w = 1`.
fn sum_in_order(grads: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut g = vec![0.0; dim];
    for gi in grads {
        axpy(1.0, gi, &mut g);
    }
    g
}

/// One reverse step given the batch's per-sample gradients. Returns the
/// contributions for the batch entries (in batch order) and `Delta_t`.
fn step_adjoint(
    plan: &TrainPlan,
    s: &OptimizerState,
    batch: &[usize],
    grads: &[Vec<f64>],
    g: &[f64],
    next: &StateAdjoint,
) -> Result<(Vec<f64>, StateAdjoint)> {
    let t = s.step;
    let u = plan.rule.vjp_grad(s, g, next)?;
    let beta: Vec<f64> = grads.iter().map(|gi| dot(gi, &u)).collect();
    let mut delta = plan.rule.vjp_state(s, g, next)?;
    let hvps = batch
        .par_iter()
        .map(|&i| plan.model.hvp(&s.params, plan.dataset.get(i), &u))
        .collect::<Result<Vec<_>>>()
        .map_err(|_| Error::NonFiniteAdjoint { step: t })?;
    for hv in &hvps {
        axpy(1.0, hv, &mut delta.params);
    }
    if !delta.is_finite() || !beta.iter().all(|b| b.is_finite()) {
        return Err(Error::NonFiniteAdjoint { step: t });
    }
    Ok((beta, delta))
}

/// The single-step kernel: `beta_t` (supported on `B_t`, as `(index, value)`
/// pairs) and `Delta_t` from `s_t` and `Delta_{t+1}`.
pub fn replay_batch_adjoint(
    plan: &TrainPlan,
    s: &OptimizerState,
    next: &StateAdjoint,
) -> Result<(Vec<(usize, f64)>, StateAdjoint)> {
    if s.step >= plan.steps {
        return Err(Error::Config(format!("step {} beyond run length {}", s.step, plan.steps)));
    }
    let batch = plan.schedule.batch(s.step);
    let grads = batch_grads(plan, s, &batch)?;
    let g = sum_in_order(&grads, plan.model.param_dim());
    let (beta, delta) = step_adjoint(plan, s, &batch, &grads, &g, next)?;
    Ok((batch.into_iter().zip(beta).collect(), delta))
}

struct Accumulator {
    plain: Vec<f64>,
    compensated: Option<Vec<CompensatedSum>>,
}

impl Accumulator {
    fn new(n: usize, compensated: bool) -> Self {
        Accumulator {
            plain: vec![0.0; n],
            compensated: compensated.then(|| vec![CompensatedSum::default(); n]),
        }
    }

    fn add(&mut self, i: usize, v: f64) {
        match &mut self.compensated {
            Some(c) => c[i].add(v),
            None => self.plain[i] += v,
        }
    }

    fn finish(self) -> Vec<f64> {
        match self.compensated {
            Some(c) => c.iter().map(CompensatedSum::value).collect(),
            None => self.plain,
        }
    }
}

struct ReplaySweep<'a> {
    plan: &'a TrainPlan,
    phis: &'a [MeasurementFn],
    ones: DataWeights,
    deltas: Vec<StateAdjoint>,
    betas: Vec<Accumulator>,
    centers: Vec<f64>,
    compensated: bool,
}

impl Sweep for ReplaySweep<'_> {
    type State = OptimizerState;

    fn start(&mut self, s: &OptimizerState) -> Result<()> {
        for phi in self.phis {
            self.centers.push(phi.measure(&self.plan.model, &s.params)?);
            let mut delta = StateAdjoint::zeros_like(s);
            // The reverse pass is linear in Delta_T, so the measurement's
            // scale is applied once to the result instead.
            delta.params = phi.unscaled_grad(&self.plan.model, &s.params)?;
            if !delta.is_finite() {
                return Err(Error::NonFiniteAdjoint { step: s.step });
            }
            self.deltas.push(delta);
            self.betas.push(Accumulator::new(self.plan.n(), self.compensated));
        }
        Ok(())
    }

    fn advance(&mut self, s: &OptimizerState, from: usize, to: usize) -> Result<OptimizerState> {
        if s.step != from {
            return Err(Error::MissingCheckpoint { step: from });
        }
        self.plan.advance(s, &self.ones, to)
    }

    fn visit(&mut self, t: usize, s: &OptimizerState) -> Result<()> {
        if s.step != t {
            return Err(Error::MissingCheckpoint { step: t });
        }
        let batch = self.plan.schedule.batch(t);
        let grads = batch_grads(self.plan, s, &batch)?;
        let g = sum_in_order(&grads, self.plan.model.param_dim());
        for (delta, beta) in self.deltas.iter_mut().zip(self.betas.iter_mut()) {
            let (contrib, next) = step_adjoint(self.plan, s, &batch, &grads, &g, delta)?;
            for (&i, b) in batch.iter().zip(contrib) {
                beta.add(i, b);
            }
            *delta = next;
        }
        Ok(())
    }
}

/// Replays one recorded run for several measurements at once; the state
/// traversal (and its recomputation) is shared.
pub fn replay_metagradients(
    plan: &TrainPlan,
    phis: &[MeasurementFn],
    store: CheckpointStore,
    options: ReplayOptions,
) -> Result<(Vec<InfluenceVector>, ReplayBudget)> {
    if store.plan_fingerprint() != plan.fingerprint() {
        return Err(Error::Config(
            "checkpoint store was recorded from a different plan".into(),
        ));
    }
    if !store.at_center() {
        return Err(Error::Config(
            "checkpoint store was not recorded at all-ones weights".into(),
        ));
    }
    let mut sweep = ReplaySweep {
        plan,
        phis,
        ones: DataWeights::ones(plan.n()),
        deltas: Vec::with_capacity(phis.len()),
        betas: Vec::with_capacity(phis.len()),
        centers: Vec::with_capacity(phis.len()),
        compensated: options.compensated,
    };
    let mut budget = ReplayBudget::for_run(plan.steps);
    sweep_store(&mut sweep, store, &mut budget)?;
    let out = sweep
        .betas
        .into_iter()
        .zip(sweep.centers)
        .zip(phis)
        .map(|((beta, center), phi)| InfluenceVector {
            values: beta.finish().into_iter().map(|b| phi.scale * b).collect(),
            center_output: center,
            plan_fingerprint: plan.fingerprint().to_string(),
            measure_fingerprint: measure_digest(phi),
        })
        .collect();
    Ok((out, budget))
}

pub fn replay_metagradient(
    plan: &TrainPlan,
    phi: &MeasurementFn,
    store: CheckpointStore,
) -> Result<(InfluenceVector, ReplayBudget)> {
    let (mut v, budget) = replay_metagradients(
        plan,
        std::slice::from_ref(phi),
        store,
        ReplayOptions::default(),
    )?;
    Ok((v.pop().expect("one measurement"), budget))
}
