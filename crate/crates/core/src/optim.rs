//! Update rules `s_{t+1} = h_t(s_t, g_t)` and their exact adjoints.
//!
//! Conventions, all with decoupled weight decay `lambda`:
//!
//! * SGD: `theta' = theta - eta g - eta lambda theta`.
//! * Heavy-ball momentum: `u' = mu u + g`, then
//!   `theta' = theta - eta u' - eta lambda theta`.
//! * Adam without bias correction:
//!   `m' = b1 m + (1 - b1) g`, `v' = b2 v + (1 - b2) g^2`,
//!   `theta' = theta - eta m' / (sqrt(v' + eps_root) + eps) - eta lambda theta`.
//!   `eps_root > 0` keeps the square root differentiable at `v' = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RuleKind {
    Sgd,
    Momentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        eps_root: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Piecewise-linear one-cycle: rises from `start_mult * peak_lr` to
    /// `peak_lr` over the first `peak_frac` of `total_steps`, then falls to
    /// `end_mult * peak_lr` at `total_steps`.
    OneCycle {
        peak_lr: f64,
        start_mult: f64,
        end_mult: f64,
        peak_frac: f64,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn lr(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::OneCycle {
                peak_lr,
                start_mult,
                end_mult,
                peak_frac,
                total_steps,
            } => {
                let total = total_steps.max(1) as f64;
                let f = (t as f64 / total).min(1.0);
                let mult = if f < peak_frac {
                    start_mult + (1.0 - start_mult) * f / peak_frac
                } else if peak_frac >= 1.0 {
                    1.0
                } else {
                    1.0 + (end_mult - 1.0) * (f - peak_frac) / (1.0 - peak_frac)
                };
                peak_lr * mult
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: RuleKind,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
}

/// The optimizer iterate `s_t`: parameters plus rule-specific moment blocks
/// (none for SGD, `[velocity]` for momentum, `[m, v]` for Adam).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.params.as_slice()).chain(self.moments.iter().map(|m| m.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Equality of step index and every stored bit pattern.
    pub fn bit_eq(&self, other: &OptimizerState) -> bool {
        self.step == other.step
            && self.moments.len() == other.moments.len()
            && self
                .blocks()
                .zip(other.blocks())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// `Delta_t = d f / d s_t`, block for block.
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint {
    pub params: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
}

impl StateAdjoint {
    pub fn zeros_like(s: &OptimizerState) -> Self {
        StateAdjoint {
            params: vec![0.0; s.params.len()],
            moments: s.moments.iter().map(|m| vec![0.0; m.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(self.moments.iter().flatten()).all(|v| v.is_finite())
    }

    pub fn scaled(mut self, c: f64) -> Self {
        for v in self.params.iter_mut().chain(self.moments.iter_mut().flatten()) {
            *v *= c;
        }
        self
    }
}

impl UpdateRule {
    pub fn sgd(lr: f64) -> Self {
        UpdateRule {
            kind: RuleKind::Sgd,
            schedule: LrSchedule::Constant { lr },
            weight_decay: 0.0,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        UpdateRule {
            kind: RuleKind::Momentum { momentum },
            schedule: LrSchedule::Constant { lr },
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64, eps_root: f64) -> Self {
        UpdateRule {
            kind: RuleKind::Adam {
                beta1,
                beta2,
                eps,
                eps_root,
            },
            schedule: LrSchedule::Constant { lr },
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn lr(&self, t: usize) -> f64 {
        self.schedule.lr(t)
    }

    pub fn moment_blocks(&self) -> usize {
        match self.kind {
            RuleKind::Sgd => 0,
            RuleKind::Momentum { .. } => 1,
            RuleKind::Adam { .. } => 2,
        }
    }

    /// Checks hyperparameters for a run of `steps` updates.
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for t in 0..steps {
            let lr = self.lr(t);
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("learning rate at step {t} is {lr}, must be > 0"));
            }
        }
        if let LrSchedule::OneCycle {
            peak_frac,
            total_steps,
            ..
        } = self.schedule
        {
            if !(peak_frac > 0.0 && peak_frac <= 1.0) {
                return bad(format!("one-cycle peak_frac {peak_frac} must be in (0, 1]"));
            }
            if total_steps != steps {
                return bad(format!(
                    "one-cycle total_steps {total_steps} differs from run length {steps}"
                ));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        let unit = |x: f64| (0.0..1.0).contains(&x);
        match self.kind {
            RuleKind::Sgd => Ok(()),
            RuleKind::Momentum { momentum } if unit(momentum) => Ok(()),
            RuleKind::Momentum { momentum } => bad(format!("momentum {momentum} not in [0, 1)")),
            RuleKind::Adam {
                beta1,
                beta2,
                eps,
                eps_root,
            } => {
                if !(unit(beta1) && unit(beta2)) {
                    bad(format!("adam betas ({beta1}, {beta2}) must lie in [0, 1)"))
                } else if !(eps_root > 0.0 && eps_root.is_finite()) {
                    bad(format!("adam eps_root {eps_root} must be > 0"))
                } else if !(eps >= 0.0 && eps.is_finite()) {
                    bad(format!("adam eps {eps} must be >= 0"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn init_state(&self, params: Vec<f64>) -> OptimizerState {
        let n = params.len();
        OptimizerState {
            params,
            moments: vec![vec![0.0; n]; self.moment_blocks()],
            step: 0,
        }
    }

    fn check_shapes(&self, s: &OptimizerState, g: &[f64]) -> Result<()> {
        let n = s.params.len();
        ensure_len("gradient", n, g.len())?;
        ensure_len("moment blocks", self.moment_blocks(), s.moments.len())?;
        for m in &s.moments {
            ensure_len("moment block", n, m.len())?;
        }
        Ok(())
    }

    fn check_adjoint(&self, s: &OptimizerState, d: &StateAdjoint) -> Result<()> {
        ensure_len("params adjoint", s.params.len(), d.params.len())?;
        ensure_len("moment adjoint blocks", s.moments.len(), d.moments.len())?;
        for (m, dm) in s.moments.iter().zip(&d.moments) {
            ensure_len("moment adjoint", m.len(), dm.len())?;
        }
        Ok(())
    }

    pub fn apply(&self, s: &OptimizerState, g: &[f64]) -> Result<OptimizerState> {
        self.check_shapes(s, g)?;
        let t = s.step;
        let lr = self.lr(t);
        let decay = 1.0 - lr * self.weight_decay;
        let next = match self.kind {
            RuleKind::Sgd => OptimizerState {
                params: s
                    .params
                    .iter()
                    .zip(g)
                    .map(|(p, gi)| decay * p - lr * gi)
                    .collect(),
                moments: vec![],
                step: t + 1,
            },
            RuleKind::Momentum { momentum } => {
                let vel: Vec<f64> = s.moments[0]
                    .iter()
                    .zip(g)
                    .map(|(u, gi)| momentum * u + gi)
                    .collect();
                let params = s
                    .params
                    .iter()
                    .zip(&vel)
                    .map(|(p, u)| decay * p - lr * u)
                    .collect();
                OptimizerState {
                    params,
                    moments: vec![vel],
                    step: t + 1,
                }
            }
            RuleKind::Adam {
                beta1,
                beta2,
                eps,
                eps_root,
            } => {
                let n = s.params.len();
                let (mut params, mut m, mut v) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    m[i] = beta1 * s.moments[0][i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * s.moments[1][i] + (1.0 - beta2) * g[i] * g[i];
                    let denom = (v[i] + eps_root).sqrt() + eps;
                    params[i] = decay * s.params[i] - lr * m[i] / denom;
                }
                OptimizerState {
                    params,
                    moments: vec![m, v],
                    step: t + 1,
                }
            }
        };
        if next.is_finite() {
            Ok(next)
        } else {
            Err(Error::Divergence {
                step: t,
                what: "non-finite optimizer state".into(),
            })
        }
    }

    /// Adjoint of `apply` with respect to the state, holding `g` fixed.
    pub fn vjp_state(
        &self,
        s: &OptimizerState,
        g: &[f64],
        next: &StateAdjoint,
    ) -> Result<StateAdjoint> {
        self.check_shapes(s, g)?;
        self.check_adjoint(s, next)?;
        let lr = self.lr(s.step);
        let decay = 1.0 - lr * self.weight_decay;
        let params: Vec<f64> = next.params.iter().map(|d| decay * d).collect();
        let moments = match self.kind {
            RuleKind::Sgd => vec![],
            RuleKind::Momentum { momentum } => vec![next.moments[0]
                .iter()
                .zip(&next.params)
                .map(|(du, dp)| momentum * (du - lr * dp))
                .collect()],
            RuleKind::Adam { beta1, beta2, .. } => {
                let (am, av) = self.adam_moment_adjoints(s, g, next);
                vec![
                    am.into_iter().map(|a| beta1 * a).collect(),
                    av.into_iter().map(|a| beta2 * a).collect(),
                ]
            }
        };
        let out = StateAdjoint { params, moments };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFiniteAdjoint { step: s.step })
        }
    }

    /// Adjoint of `apply` with respect to the aggregated gradient `g`.
    pub fn vjp_grad(&self, s: &OptimizerState, g: &[f64], next: &StateAdjoint) -> Result<Vec<f64>> {
        self.check_shapes(s, g)?;
        self.check_adjoint(s, next)?;
        let lr = self.lr(s.step);
        let out: Vec<f64> = match self.kind {
            RuleKind::Sgd => next.params.iter().map(|d| -lr * d).collect(),
            RuleKind::Momentum { .. } => next.moments[0]
                .iter()
                .zip(&next.params)
                .map(|(du, dp)| du - lr * dp)
                .collect(),
            RuleKind::Adam { beta1, beta2, .. } => {
                let (am, av) = self.adam_moment_adjoints(s, g, next);
                am.iter()
                    .zip(&av)
                    .zip(g)
                    .map(|((a_m, a_v), gi)| (1.0 - beta1) * a_m + 2.0 * (1.0 - beta2) * gi * a_v)
                    .collect()
            }
        };
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFiniteAdjoint { step: s.step })
        }
    }

    /// Total adjoints reaching the updated moments `m'` and `v'`: their own
    /// incoming adjoint plus the path through the parameter update.
    fn adam_moment_adjoints(
        &self,
        s: &OptimizerState,
        g: &[f64],
        next: &StateAdjoint,
    ) -> (Vec<f64>, Vec<f64>) {
        let RuleKind::Adam {
            beta1,
            beta2,
            eps,
            eps_root,
        } = self.kind
        else {
            unreachable!("adam adjoint on non-adam rule")
        };
        let lr = self.lr(s.step);
        let n = s.params.len();
        let (mut am, mut av) = (vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let m = beta1 * s.moments[0][i] + (1.0 - beta1) * g[i];
            let v = beta2 * s.moments[1][i] + (1.0 - beta2) * g[i] * g[i];
            let root = (v + eps_root).sqrt();
            let denom = root + eps;
            let dp = next.params[i];
            am[i] = next.moments[0][i] - lr * dp / denom;
            av[i] = next.moments[1][i] + lr * dp * m / (denom * denom * 2.0 * root);
        }
        (am, av)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rules() -> Vec<UpdateRule> {
        vec![
            UpdateRule::sgd(0.3).with_weight_decay(0.01),
            UpdateRule::momentum(0.2, 0.9).with_weight_decay(0.05),
            UpdateRule::adam(0.1, 0.9, 0.999, 1e-8, 1e-6).with_weight_decay(1e-3),
            UpdateRule::adam(0.05, 0.95, 0.975, 1e-8, 1e-6).with_schedule(LrSchedule::OneCycle {
                peak_lr: 0.05,
                start_mult: 0.1,
                end_mult: 0.2,
                peak_frac: 0.25,
                total_steps: 10,
            }),
        ]
    }

    fn random_state(rule: &UpdateRule, rng: &mut ChaCha8Rng, n: usize) -> OptimizerState {
        let mut s = rule.init_state((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        for (k, m) in s.moments.iter_mut().enumerate() {
            for x in m.iter_mut() {
                // Adam's second moment stays non-negative
                *x = if k == 1 {
                    rng.random_range(0.0..0.5)
                } else {
                    rng.random_range(-1.0..1.0)
                };
            }
        }
        s.step = rng.random_range(0..10);
        s
    }

    fn random_adjoint(s: &OptimizerState, rng: &mut ChaCha8Rng) -> StateAdjoint {
        let mut d = StateAdjoint::zeros_like(s);
        for x in d.params.iter_mut().chain(d.moments.iter_mut().flatten()) {
            *x = rng.random_range(-1.0..1.0);
        }
        d
    }

    fn pairing(d: &StateAdjoint, s: &OptimizerState) -> f64 {
        dot(&d.params, &s.params)
            + d.moments
                .iter()
                .zip(&s.moments)
                .map(|(a, b)| dot(a, b))
                .sum::<f64>()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-6)
    }

    #[test]
    fn sgd_example() {
        let r = UpdateRule::sgd(0.1);
        let s = r.init_state(vec![1.0, 2.0]);
        let next = r.apply(&s, &[0.5, 1.0]).unwrap();
        assert!((next.params[0] - 0.95).abs() < 1e-15);
        assert!((next.params[1] - 1.90).abs() < 1e-15);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn adam_zero_gradient_fixed_point() {
        let r = UpdateRule::adam(0.1, 0.9, 0.999, 1e-8, 1e-6);
        let s = r.init_state(vec![0.3, -1.2]);
        let next = r.apply(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(next.params, s.params);
        assert_eq!(next.moments, vec![vec![0.0; 2], vec![0.0; 2]]);
    }

    #[test]
    fn momentum_example() {
        let r = UpdateRule::momentum(1.0, 0.9);
        let mut s = r.init_state(vec![0.0, 0.0]);
        s.moments[0] = vec![1.0, 0.0];
        let next = r.apply(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(next.moments[0], vec![0.9, 0.0]);
        assert_eq!(next.params, vec![-0.9, 0.0]);
    }

    #[test]
    fn sgd_adjoints_closed_form() {
        let r = UpdateRule::sgd(0.1);
        let s = r.init_state(vec![1.0, 2.0]);
        let d = StateAdjoint {
            params: vec![1.0, 2.0],
            moments: vec![],
        };
        assert_eq!(r.vjp_state(&s, &[0.5, 0.5], &d).unwrap(), d);
        let vg = r.vjp_grad(&s, &[0.5, 0.5], &d).unwrap();
        assert!((vg[0] + 0.1).abs() < 1e-15 && (vg[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_adjoint_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in rules() {
            let s = random_state(&r, &mut rng, 4);
            let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = StateAdjoint::zeros_like(&s);
            assert_eq!(r.vjp_state(&s, &g, &z).unwrap(), z);
            assert_eq!(r.vjp_grad(&s, &g, &z).unwrap(), vec![0.0; 4]);
        }
    }

    /// Directional finite differences of `<delta, apply(s, g)>` along every
    /// state and gradient coordinate, 100 random instances per rule.
    #[test]
    fn adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-6;
        for r in rules() {
            for _ in 0..100 {
                let n = 3;
                let s = random_state(&r, &mut rng, n);
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d = random_adjoint(&s, &mut rng);
                let obj = |s: &OptimizerState, g: &[f64]| pairing(&d, &r.apply(s, g).unwrap());
                let ds = r.vjp_state(&s, &g, &d).unwrap();
                let dg = r.vjp_grad(&s, &g, &d).unwrap();
                for i in 0..n {
                    let (mut gp, mut gm) = (g.clone(), g.clone());
                    gp[i] += h;
                    gm[i] -= h;
                    let fd = (obj(&s, &gp) - obj(&s, &gm)) / (2.0 * h);
                    assert!(rel(dg[i], fd) < 1e-6, "{r:?} grad {i}: {} vs {fd}", dg[i]);
                }
                for b in 0..=s.moments.len() {
                    for i in 0..n {
                        let (mut sp, mut sm) = (s.clone(), s.clone());
                        let (p, m) = if b == 0 {
                            (&mut sp.params[i], &mut sm.params[i])
                        } else {
                            (&mut sp.moments[b - 1][i], &mut sm.moments[b - 1][i])
                        };
                        *p += h;
                        *m -= h;
                        let fd = (obj(&sp, &g) - obj(&sm, &g)) / (2.0 * h);
                        let an = if b == 0 { ds.params[i] } else { ds.moments[b - 1][i] };
                        assert!(rel(an, fd) < 1e-6, "{r:?} block {b} coord {i}: {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn apply_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for r in rules() {
            let s = random_state(&r, &mut rng, 5);
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(r.apply(&s, &g).unwrap().bit_eq(&r.apply(&s, &g).unwrap()));
        }
    }

    #[test]
    fn adam_adjoint_finite_at_zero_second_moment() {
        let r = UpdateRule::adam(0.1, 0.9, 0.999, 0.0, 1e-6);
        let s = r.init_state(vec![0.0; 3]);
        let d = StateAdjoint {
            params: vec![1.0; 3],
            moments: vec![vec![1.0; 3], vec![1.0; 3]],
        };
        assert!(r.vjp_state(&s, &[0.0; 3], &d).unwrap().is_finite());
        assert!(r.vjp_grad(&s, &[0.0; 3], &d).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn validation() {
        assert!(UpdateRule::sgd(0.0).validate(3).is_err());
        assert!(UpdateRule::adam(0.1, 0.9, 0.999, 1e-8, 0.0).validate(3).is_err());
        assert!(UpdateRule::adam(0.1, 1.0, 0.999, 1e-8, 1e-6).validate(3).is_err());
        assert!(UpdateRule::momentum(0.1, 0.9).validate(3).is_ok());
        let oc = UpdateRule::sgd(1.0).with_schedule(LrSchedule::OneCycle {
            peak_lr: 1.0,
            start_mult: 0.07,
            end_mult: 0.2,
            peak_frac: 0.5,
            total_steps: 10,
        });
        assert!(oc.validate(10).is_ok());
        assert!(oc.validate(11).is_err());
    }

    #[test]
    fn one_cycle_shape() {
        let s = LrSchedule::OneCycle {
            peak_lr: 1.0,
            start_mult: 0.1,
            end_mult: 0.2,
            peak_frac: 0.5,
            total_steps: 10,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert!((s.lr(5) - 1.0).abs() < 1e-15);
        assert!((s.lr(10) - 0.2).abs() < 1e-15);
        assert!(s.lr(3) > s.lr(2) && s.lr(7) < s.lr(6));
    }
}
