//! Model and loss families.
//!
//! Every family supplies the per-sample primitives the reverse pass needs:
//! loss value, parameter gradient, Hessian-vector product and gradient dot
//! products. Linear and logistic regression use closed forms; the MLP runs its
//! generic forward/backward code on dual numbers for the Hessian-vector
//! product.

pub mod dual;
pub mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Target, TaskKind};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::dot;
use dual::{sigmoid_f64, softplus_f64, Dual, Scalar};
pub use mlp::{Activation, MlpSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelFamily {
    /// `pred = theta . x`, loss `(pred - y)^2 / 2`.
    WeightedLinearRegression { dim: usize },
    /// Binary logistic regression on a single logit `theta . x`.
    LogisticRegression { dim: usize },
    Mlp(MlpSpec),
}

impl ModelFamily {
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        ModelFamily::Mlp(MlpSpec {
            widths: widths.to_vec(),
            activation,
        })
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ModelFamily::WeightedLinearRegression { dim }
            | ModelFamily::LogisticRegression { dim } => *dim,
            ModelFamily::Mlp(spec) => spec.param_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelFamily::WeightedLinearRegression { dim }
            | ModelFamily::LogisticRegression { dim } => *dim,
            ModelFamily::Mlp(spec) => spec.input_dim(),
        }
    }

    /// Checks the family is well formed and compatible with a dataset.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.input_dim() != data.feature_dim() {
            return Err(Error::Config(format!(
                "model expects {} features, dataset has {}",
                self.input_dim(),
                data.feature_dim()
            )));
        }
        match (self, data.task()) {
            (ModelFamily::WeightedLinearRegression { .. }, TaskKind::Regression) => Ok(()),
            (ModelFamily::LogisticRegression { .. }, TaskKind::Classification { classes: 2 }) => {
                Ok(())
            }
            (ModelFamily::Mlp(spec), task) => {
                if spec.widths.len() < 2 || spec.widths.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp widths {:?} must have >= 2 non-zero entries",
                        spec.widths
                    )));
                }
                match (spec.output_dim(), task) {
                    (1, TaskKind::Regression) | (1, TaskKind::Classification { classes: 2 }) => {
                        Ok(())
                    }
                    (k, TaskKind::Classification { classes }) if k == classes => Ok(()),
                    (k, task) => Err(Error::Config(format!(
                        "mlp output width {k} does not fit task {task:?}"
                    ))),
                }
            }
            (m, task) => Err(Error::Config(format!("model {m:?} does not fit task {task:?}"))),
        }
    }

    /// Seeded initial parameters. Linear and logistic regression start at
    /// zero; MLP weights are Glorot-uniform, `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, and biases start at zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        match self {
            ModelFamily::WeightedLinearRegression { dim }
            | ModelFamily::LogisticRegression { dim } => vec![0.0; *dim],
            ModelFamily::Mlp(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = vec![0.0; spec.param_dim()];
                for (w_off, _, fan_in, fan_out) in spec.layers() {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for p in &mut params[w_off..w_off + fan_in * fan_out] {
                        *p = rng.random_range(-a..a);
                    }
                }
                params
            }
        }
    }

    fn check(&self, params: &[f64], z: &Example) -> Result<()> {
        ensure_len("params", self.param_dim(), params.len())?;
        ensure_len("features", self.input_dim(), z.features.len())
    }

    /// Raw model outputs (prediction or logits).
    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match self {
            ModelFamily::WeightedLinearRegression { .. }
            | ModelFamily::LogisticRegression { .. } => vec![dot(params, x)],
            ModelFamily::Mlp(spec) => mlp::forward(spec, params, x).logits().to_vec(),
        }
    }

    pub fn loss(&self, params: &[f64], z: &Example) -> Result<f64> {
        self.check(params, z)?;
        let value = match self {
            ModelFamily::WeightedLinearRegression { .. } => {
                let r = dot(params, &z.features) - real_target(z)?;
                0.5 * r * r
            }
            ModelFamily::LogisticRegression { .. } => {
                let y = binary_target(z)?;
                let logit = dot(params, &z.features);
                softplus_f64(logit) - y * logit
            }
            ModelFamily::Mlp(spec) => {
                let fwd = mlp::forward::<f64>(spec, params, &z.features);
                head(fwd.logits(), z.target)?.0
            }
        };
        finite_scalar("loss", value)
    }

    pub fn grad(&self, params: &[f64], z: &Example) -> Result<Vec<f64>> {
        self.check(params, z)?;
        let g = match self {
            ModelFamily::WeightedLinearRegression { .. } => {
                let r = dot(params, &z.features) - real_target(z)?;
                z.features.iter().map(|x| r * x).collect()
            }
            ModelFamily::LogisticRegression { .. } => {
                let y = binary_target(z)?;
                let r = sigmoid_f64(dot(params, &z.features)) - y;
                z.features.iter().map(|x| r * x).collect()
            }
            ModelFamily::Mlp(spec) => {
                let fwd = mlp::forward::<f64>(spec, params, &z.features);
                let (_, dlogits) = head(fwd.logits(), z.target)?;
                mlp::backward(spec, params, &fwd, dlogits)
            }
        };
        finite_vec("grad", g)
    }

    /// `H(z; params) v`, the derivative of `grad` along `v`.
    pub fn hvp(&self, params: &[f64], z: &Example, v: &[f64]) -> Result<Vec<f64>> {
        self.check(params, z)?;
        ensure_len("hvp direction", self.param_dim(), v.len())?;
        let hv = match self {
            ModelFamily::WeightedLinearRegression { .. } => {
                real_target(z)?;
                let xv = dot(&z.features, v);
                z.features.iter().map(|x| xv * x).collect()
            }
            ModelFamily::LogisticRegression { .. } => {
                binary_target(z)?;
                let s = sigmoid_f64(dot(params, &z.features));
                let c = s * (1.0 - s) * dot(&z.features, v);
                z.features.iter().map(|x| c * x).collect()
            }
            ModelFamily::Mlp(spec) => {
                let seeded: Vec<Dual> = params
                    .iter()
                    .zip(v)
                    .map(|(&p, &d)| Dual::new(p, d))
                    .collect();
                let fwd = mlp::forward(spec, &seeded, &z.features);
                let (_, dlogits) = head(fwd.logits(), z.target)?;
                mlp::backward(spec, &seeded, &fwd, dlogits)
                    .into_iter()
                    .map(|d| d.du)
                    .collect()
            }
        };
        finite_vec("hvp", hv)
    }

    /// `grad(params, z) . v`.
    pub fn grad_dot(&self, params: &[f64], z: &Example, v: &[f64]) -> Result<f64> {
        self.check(params, z)?;
        ensure_len("grad_dot direction", self.param_dim(), v.len())?;
        let value = match self {
            ModelFamily::WeightedLinearRegression { .. } => {
                let r = dot(params, &z.features) - real_target(z)?;
                r * dot(&z.features, v)
            }
            ModelFamily::LogisticRegression { .. } => {
                let y = binary_target(z)?;
                (sigmoid_f64(dot(params, &z.features)) - y) * dot(&z.features, v)
            }
            ModelFamily::Mlp(_) => dot(&self.grad(params, z)?, v),
        };
        finite_scalar("grad_dot", value)
    }

    /// Signed-margin decomposition of the loss used by linearised baselines:
    /// returns `(grad of margin, d loss / d margin)`, so the loss gradient is
    /// `dloss_dmargin * grad_margin`.
    pub fn margin_grad(&self, params: &[f64], z: &Example) -> Result<(Vec<f64>, f64)> {
        self.check(params, z)?;
        let (g, dl) = match self {
            ModelFamily::WeightedLinearRegression { .. } => {
                let r = dot(params, &z.features) - real_target(z)?;
                (z.features.clone(), r)
            }
            ModelFamily::LogisticRegression { .. } => {
                let sign = 2.0 * binary_target(z)? - 1.0;
                let m = sign * dot(params, &z.features);
                (
                    z.features.iter().map(|x| sign * x).collect(),
                    -sigmoid_f64(-m),
                )
            }
            ModelFamily::Mlp(spec) => {
                let fwd = mlp::forward::<f64>(spec, params, &z.features);
                let (dmargin, dl) = margin(fwd.logits(), z.target)?;
                (mlp::backward(spec, params, &fwd, dmargin), dl)
            }
        };
        Ok((finite_vec("margin grad", g)?, finite_scalar("margin", dl)?))
    }
}

fn real_target(z: &Example) -> Result<f64> {
    match z.target {
        Target::Real(y) => Ok(y),
        Target::Class(_) => Err(Error::Data("regression loss needs a real target".into())),
    }
}

fn binary_target(z: &Example) -> Result<f64> {
    match z.target {
        Target::Class(0) => Ok(0.0),
        Target::Class(1) => Ok(1.0),
        t => Err(Error::Data(format!("binary loss needs class 0 or 1, got {t:?}"))),
    }
}

fn finite_scalar(what: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what })
    }
}

fn finite_vec(what: &'static str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite { what })
    }
}

/// Loss on the logits and its cotangent.
fn head<S: Scalar>(logits: &[S], target: Target) -> Result<(S, Vec<S>)> {
    match (logits.len(), target) {
        (1, Target::Real(y)) => {
            let r = logits[0] - S::from_f64(y);
            Ok((S::from_f64(0.5) * r * r, vec![r]))
        }
        (1, Target::Class(c)) if c < 2 => {
            let y = S::from_f64(c as f64);
            let z = logits[0];
            Ok((z.softplus() - y * z, vec![z.sigmoid() - y]))
        }
        (k, Target::Class(c)) if k >= 2 && c < k => {
            let lse = log_sum_exp(logits.iter().copied());
            let d = logits
                .iter()
                .enumerate()
                .map(|(j, &z)| {
                    let p = (z - lse).exp();
                    if j == c {
                        p - S::from_f64(1.0)
                    } else {
                        p
                    }
                })
                .collect();
            Ok((lse - logits[c], d))
        }
        (k, t) => Err(Error::Data(format!("target {t:?} does not fit {k} model outputs"))),
    }
}

/// Margin `m` with `loss = softplus(-m)` for classification, or the raw
/// prediction for regression. Returns `(d m / d logits, d loss / d m)`.
fn margin(logits: &[f64], target: Target) -> Result<(Vec<f64>, f64)> {
    match (logits.len(), target) {
        (1, Target::Real(y)) => Ok((vec![1.0], logits[0] - y)),
        (1, Target::Class(c)) if c < 2 => {
            let sign = 2.0 * c as f64 - 1.0;
            Ok((vec![sign], -sigmoid_f64(-sign * logits[0])))
        }
        (k, Target::Class(c)) if k >= 2 && c < k => {
            let others = logits
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != c)
                .map(|(_, &z)| z);
            let lse_others = log_sum_exp(others);
            let m = logits[c] - lse_others;
            let d = logits
                .iter()
                .enumerate()
                .map(|(j, &z)| {
                    if j == c {
                        1.0
                    } else {
                        -(z - lse_others).exp()
                    }
                })
                .collect();
            Ok((d, -sigmoid_f64(-m)))
        }
        (k, t) => Err(Error::Data(format!("target {t:?} does not fit {k} model outputs"))),
    }
}

/// `ln sum exp`, shifted by the largest real part. The shift is a constant so
/// derivatives are unaffected.
fn log_sum_exp<S: Scalar>(xs: impl Iterator<Item = S> + Clone) -> S {
    let shift = xs.clone().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let s = S::from_f64(shift);
    let mut acc = S::zero();
    for x in xs {
        acc += (x - s).exp();
    }
    s + acc.ln()
}
