#![allow(dead_code)]

use metagrad::data::split;
use metagrad::{
    Activation, BatchSchedule, Dataset, Example, Generator, MeasurementFn, ModelFamily, SyntheticSpec, TrainPlan,
    UpdateRule,
};

pub fn moons(n: usize, noise: f64, seed: u64) -> (Dataset, Dataset) {
    let pool = SyntheticSpec {
        generator: Generator::Moons,
        n: n + 4,
        dim: 2,
        noise,
        classes: 2,
        seed,
    }
    .generate()
    .unwrap();
    split(&pool, n).unwrap()
}

pub fn mlp_plan(n: usize, rule: UpdateRule, batch: usize, steps: usize) -> (TrainPlan, MeasurementFn) {
    let (train, test) = moons(n, 0.2, 3);
    let plan = TrainPlan::new(
        train,
        ModelFamily::mlp(&[2, 8, 1], Activation::Tanh),
        rule,
        BatchSchedule::new(5, n, batch).unwrap(),
        1,
        steps,
    )
    .unwrap();
    (plan, MeasurementFn::test_loss("test0", test.get(0).clone()))
}

/// Ridge regression through decoupled weight decay on a linear model.
pub fn ridge_plan(n: usize, dim: usize, lambda: f64, lr: f64, steps: usize) -> (TrainPlan, Dataset) {
    let pool = SyntheticSpec {
        generator: Generator::LinearRegression,
        n: n + 8,
        dim,
        noise: 0.5,
        classes: 2,
        seed: 21,
    }
    .generate()
    .unwrap();
    let (train, test) = split(&pool, n).unwrap();
    let plan = TrainPlan::new(
        train,
        ModelFamily::WeightedLinearRegression { dim },
        UpdateRule::sgd(lr).with_weight_decay(lambda),
        BatchSchedule::new(0, n, n).unwrap(),
        0,
        steps,
    )
    .unwrap();
    (plan, test)
}

/// Normal-equations oracle: `(X^T W X + lambda I)^{-1} X^T W y`, solved by
/// Gaussian elimination with partial pivoting.
pub fn weighted_ridge(examples: &[Example], w: &[f64], lambda: f64) -> Vec<f64> {
    let d = examples[0].features.len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (z, &wi) in examples.iter().zip(w) {
        let y = match z.target {
            metagrad::Target::Real(y) => y,
            _ => unreachable!(),
        };
        for r in 0..d {
            for c in 0..d {
                a[r][c] += wi * z.features[r] * z.features[c];
            }
            a[r][d] += wi * z.features[r] * y;
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[r] += lambda;
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..d).map(|r| a[r][d] / a[r][r]).collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
