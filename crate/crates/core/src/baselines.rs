//! Reference estimators: finite differences through retraining, the convex
//! closed form, a single-model TRAK variant and plain gradient similarity.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Target;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::measure::MeasurementFn;
use crate::model::ModelFamily;
use crate::optim::RuleKind;
use crate::replay::{measure_digest, InfluenceVector};
use crate::trainer::{DataWeights, TrainPlan};

/// Relative ridge added to the projected Gram matrix: `lambda =
/// TRAK_RIDGE * trace(Phi^T Phi) / k`, or 1 if the trace vanishes.
pub const TRAK_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineKind {
    FiniteDifference { h: f64 },
    ConvexIj,
    TrakLite { projection_dim: usize, seed: u64 },
    GradDot,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::FiniteDifference { .. } => "finite-difference",
            BaselineKind::ConvexIj => "convex-ij",
            BaselineKind::TrakLite { .. } => "trak-lite",
            BaselineKind::GradDot => "grad-dot",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineKind::FiniteDifference { h } if !(h > 0.0 && h.is_finite()) => {
                Err(Error::Config(format!("finite-difference step {h} must be > 0")))
            }
            BaselineKind::TrakLite { projection_dim: 0, .. } => {
                Err(Error::Config("trak-lite projection_dim must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn scores(&self, plan: &TrainPlan, phi: &MeasurementFn) -> Result<InfluenceVector> {
        self.validate()?;
        match *self {
            BaselineKind::FiniteDifference { h } => fd_influence(plan, phi, h),
            BaselineKind::ConvexIj => convex_ij_influence(plan, phi),
            BaselineKind::TrakLite { projection_dim, seed } => trak_lite(plan, phi, projection_dim, seed),
            BaselineKind::GradDot => grad_dot(plan, phi),
        }
    }
}

fn wrap(plan: &TrainPlan, phi: &MeasurementFn, values: Vec<f64>, center: f64) -> InfluenceVector {
    InfluenceVector {
        values,
        center_output: center,
        plan_fingerprint: plan.fingerprint().to_string(),
        measure_fingerprint: measure_digest(phi),
    }
}

/// Central differences `(f(1 + h e_i) - f(1 - h e_i)) / 2h`, 2N retrainings
/// run in parallel across coordinates.
pub fn fd_influence(plan: &TrainPlan, phi: &MeasurementFn, h: f64) -> Result<InfluenceVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {h} must be > 0")));
    }
    let n = plan.n();
    let center = plan.model_output(phi, &DataWeights::ones(n))?;
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let at = |d: f64| {
                let mut w = DataWeights::ones(n);
                w.0[i] += d;
                plan.model_output(phi, &w)
            };
            Ok((at(h)? - at(-h)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(wrap(plan, phi, values, center))
}

/// Minimizer of `sum_i l_i + lambda/2 |theta|^2` for weighted linear
/// regression, and the Cholesky factor of its Hessian.
fn ridge_solution(plan: &TrainPlan) -> Result<(Vec<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let dim = match plan.model {
        ModelFamily::WeightedLinearRegression { dim } => dim,
        _ => return Err(Error::Config("convex-ij needs a weighted linear regression model".into())),
    };
    if !matches!(plan.rule.kind, RuleKind::Sgd | RuleKind::Momentum { .. }) {
        return Err(Error::Config(
            "convex-ij needs a gradient-descent rule whose fixed point is the ridge minimizer".into(),
        ));
    }
    let lambda = plan.rule.weight_decay;
    let mut h = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut rhs = DVector::<f64>::zeros(dim);
    for z in plan.dataset.examples() {
        let x = DVector::from_column_slice(&z.features);
        let y = match z.target {
            Target::Real(y) => y,
            Target::Class(_) => return Err(Error::Data("convex-ij needs real targets".into())),
        };
        h += &x * x.transpose();
        rhs += &x * y;
    }
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Singular("ridge Hessian is not positive definite".into()))?;
    let theta = chol.solve(&rhs);
    Ok((theta.as_slice().to_vec(), chol))
}

/// Closed-form influence `-grad phi(theta*)^T H^{-1} grad l_i(theta*)` at
/// the exact ridge minimizer, `H = X^T X + lambda I`.
pub fn convex_ij_influence(plan: &TrainPlan, phi: &MeasurementFn) -> Result<InfluenceVector> {
    let (theta, chol) = ridge_solution(plan)?;
    let gphi = phi.measure_grad(&plan.model, &theta)?;
    let u = chol.solve(&DVector::from_column_slice(&gphi));
    let values = plan
        .dataset
        .examples()
        .iter()
        .map(|z| Ok(-plan.model.grad_dot(&theta, z, u.as_slice())?))
        .collect::<Result<Vec<f64>>>()?;
    let center = phi.measure(&plan.model, &theta)?;
    Ok(wrap(plan, phi, values, center))
}

/// Seeded `k x d` matrix of `+-1/sqrt(k)` entries, row-major.
pub fn sign_projection(k: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (k as f64).sqrt();
    (0..k * d).map(|_| if rng.random::<bool>() { s } else { -s }).collect()
}

fn project(p: &[f64], k: usize, g: &[f64]) -> DVector<f64> {
    let d = g.len();
    DVector::from_iterator(k, (0..k).map(|r| dot(&p[r * d..(r + 1) * d], g)))
}

/// Single-model TRAK: margin gradients at the trained parameters, randomly
/// projected to `k` dimensions, scored through the ridge-regularised
/// projected kernel. Scores carry the sign convention of an influence
/// vector but not its scale.
pub fn trak_lite(plan: &TrainPlan, phi: &MeasurementFn, projection_dim: usize, seed: u64) -> Result<InfluenceVector> {
    if projection_dim == 0 {
        return Err(Error::Config("trak-lite projection_dim must be >= 1".into()));
    }
    let k = projection_dim;
    let s = plan.train(&DataWeights::ones(plan.n()))?;
    let d = plan.model.param_dim();
    let p = sign_projection(k, d, seed);
    let feats: Vec<(DVector<f64>, f64)> = plan
        .dataset
        .examples()
        .par_iter()
        .map(|z| {
            let (gm, dl) = plan.model.margin_grad(&s.params, z)?;
            Ok((project(&p, k, &gm), dl))
        })
        .collect::<Result<_>>()?;
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for (f, _) in &feats {
        gram += f * f.transpose();
    }
    let trace = gram.trace();
    let lambda = if trace > 0.0 { TRAK_RIDGE * trace / k as f64 } else { 1.0 };
    gram += DMatrix::<f64>::identity(k, k) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("projected TRAK kernel is not positive definite".into()))?;
    let gphi = phi.measure_grad(&plan.model, &s.params)?;
    let u = chol.solve(&project(&p, k, &gphi));
    let values = feats.iter().map(|(f, dl)| -u.dot(f) * dl).collect();
    let center = phi.measure(&plan.model, &s.params)?;
    Ok(wrap(plan, phi, values, center))
}

/// `-grad phi . grad l_i` at the trained parameters.
pub fn grad_dot(plan: &TrainPlan, phi: &MeasurementFn) -> Result<InfluenceVector> {
    let s = plan.train(&DataWeights::ones(plan.n()))?;
    let gphi = phi.measure_grad(&plan.model, &s.params)?;
    let values = plan
        .dataset
        .examples()
        .par_iter()
        .map(|z| Ok(-plan.model.grad_dot(&s.params, z, &gphi)?))
        .collect::<Result<Vec<f64>>>()?;
    let center = phi.measure(&plan.model, &s.params)?;
    Ok(wrap(plan, phi, values, center))
}
