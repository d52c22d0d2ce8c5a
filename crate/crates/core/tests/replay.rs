//! The reverse pass against independent oracles: finite differences through
//! retraining, manual composition of single steps, and bit-identity across
//! checkpoint policies and storage.

mod common;

use common::{mlp_plan, ridge_plan, weighted_ridge};
use metagrad::linalg::max_rel_err;
use metagrad::{
    fd_influence, replay_batch_adjoint, replay_metagradient, replay_metagradients, simulate_schedule,
    CheckpointStore, DataWeights, Example, MeasurementFn, ReplayOptions, RetentionPolicy, StateAdjoint,
    UpdateRule,
};

fn replay(plan: &metagrad::TrainPlan, phi: &MeasurementFn, policy: RetentionPolicy) -> metagrad::InfluenceVector {
    let (_, store) = plan.train_recorded(&DataWeights::ones(plan.n()), policy).unwrap();
    replay_metagradient(plan, phi, store).unwrap().0
}

#[test]
fn matches_finite_differences_for_each_rule() {
    for rule in [
        UpdateRule::sgd(0.05),
        UpdateRule::momentum(0.02, 0.9).with_weight_decay(0.01),
        UpdateRule::adam(0.01, 0.9, 0.999, 1e-8, 1e-6),
    ] {
        let (plan, phi) = mlp_plan(24, rule, 8, 12);
        let exact = replay(&plan, &phi, RetentionPolicy::Logarithmic);
        let fd = fd_influence(&plan, &phi, 1e-4).unwrap();
        let err = max_rel_err(&exact.values, &fd.values, 1e-6);
        assert!(err <= 1e-5, "{:?}: {err}", rule.kind);
        assert_eq!(exact.center_output, fd.center_output);
    }
}

#[test]
fn one_step_scalar_matches_hand_computation() {
    let ds = metagrad::Dataset::new(vec![Example::regression(vec![1.0], 1.0)], metagrad::TaskKind::Regression)
        .unwrap();
    let plan = metagrad::TrainPlan::with_epochs(
        ds,
        metagrad::ModelFamily::WeightedLinearRegression { dim: 1 },
        UpdateRule::sgd(0.5),
        1,
        0,
        0,
        1,
    )
    .unwrap();
    let phi = MeasurementFn::test_loss("z", Example::regression(vec![1.0], 1.0));
    // theta_1 = 0.5 w, f = (theta_1 - 1)^2 / 2, df/dw = (0.5 - 1) * 0.5
    let fd = fd_influence(&plan, &phi, 1e-3).unwrap();
    assert!((fd.values[0] + 0.25).abs() < 1e-12);
    assert_eq!(replay(&plan, &phi, RetentionPolicy::RetainAll).values, vec![-0.25]);
}

#[test]
fn composition_of_single_steps() {
    for steps in 1..=3 {
        let (plan, phi) = mlp_plan(12, UpdateRule::adam(0.05, 0.9, 0.99, 1e-8, 1e-6), 4, steps);
        let ones = DataWeights::ones(plan.n());
        let mut states = vec![plan.initial_state()];
        for t in 0..steps {
            let next = plan.advance(&states[t], &ones, t + 1).unwrap();
            states.push(next);
        }
        let mut delta = StateAdjoint::zeros_like(&states[steps]);
        delta.params = phi.measure_grad(&plan.model, &states[steps].params).unwrap();
        let mut beta = vec![0.0; plan.n()];
        for t in (0..steps).rev() {
            let (contrib, prev) = replay_batch_adjoint(&plan, &states[t], &delta).unwrap();
            for (i, b) in contrib {
                beta[i] += b;
            }
            delta = prev;
        }
        assert_eq!(replay(&plan, &phi, RetentionPolicy::Logarithmic).values, beta);
    }
}

#[test]
fn policies_give_bit_identical_influence() {
    let (plan, phi) = mlp_plan(20, UpdateRule::momentum(0.02, 0.5), 3, 37);
    let reference = replay(&plan, &phi, RetentionPolicy::RetainAll);
    for policy in [
        RetentionPolicy::Logarithmic,
        RetentionPolicy::two_level(37),
        RetentionPolicy::Periodic { interval: 5 },
    ] {
        let v = replay(&plan, &phi, policy);
        assert!(
            v.values.iter().zip(&reference.values).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{policy:?}"
        );
        assert_eq!(v.center_output.to_bits(), reference.center_output.to_bits());
    }
}

#[test]
fn replay_budget_matches_simulation() {
    for steps in [1, 2, 7, 16, 33] {
        let (plan, phi) = mlp_plan(8, UpdateRule::sgd(0.05), 2, steps);
        for policy in [RetentionPolicy::Logarithmic, RetentionPolicy::RetainAll, RetentionPolicy::two_level(steps)] {
            let (_, store) = plan.train_recorded(&DataWeights::ones(8), policy).unwrap();
            let (_, budget) = replay_metagradient(&plan, &phi, store).unwrap();
            let sim = simulate_schedule(policy, steps);
            assert_eq!(budget.recompute_steps_total, sim.recompute_steps_total);
            assert_eq!(budget.peak_live_states, sim.peak_live_states);
            assert_eq!(budget.forward_steps_total, steps);
        }
    }
}

#[test]
fn shared_pass_equals_separate_passes() {
    let (plan, phi) = mlp_plan(16, UpdateRule::sgd(0.05), 4, 9);
    let other = MeasurementFn::test_loss("other", plan.dataset.get(3).clone()).scaled(2.0);
    let (_, store) = plan.train_recorded(&DataWeights::ones(16), RetentionPolicy::Logarithmic).unwrap();
    let (both, _) = replay_metagradients(&plan, &[phi.clone(), other.clone()], store, ReplayOptions::default()).unwrap();
    assert_eq!(both[0], replay(&plan, &phi, RetentionPolicy::Logarithmic));
    assert_eq!(both[1], replay(&plan, &other, RetentionPolicy::Logarithmic));
}

#[test]
fn compensated_accumulation_stays_close() {
    let (plan, phi) = mlp_plan(16, UpdateRule::sgd(0.05), 4, 20);
    let plain = replay(&plan, &phi, RetentionPolicy::Logarithmic);
    let (_, store) = plan.train_recorded(&DataWeights::ones(16), RetentionPolicy::Logarithmic).unwrap();
    let (comp, _) = replay_metagradients(
        &plan,
        std::slice::from_ref(&phi),
        store,
        ReplayOptions { compensated: true },
    )
    .unwrap();
    assert!(max_rel_err(&comp[0].values, &plain.values, 1e-6) < 1e-12);
}

#[test]
fn disk_spilled_store_replays_identically() {
    let (plan, phi) = mlp_plan(16, UpdateRule::adam(0.01, 0.9, 0.999, 1e-8, 1e-6), 4, 21);
    let reference = replay(&plan, &phi, RetentionPolicy::Logarithmic);
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = plan.train_recorded(&DataWeights::ones(16), RetentionPolicy::Logarithmic).unwrap();
    let store = store.spill_to(&dir.path().join("spill")).unwrap();
    assert_eq!(replay_metagradient(&plan, &phi, store).unwrap().0, reference);

    let (_, store) = plan.train_recorded(&DataWeights::ones(16), RetentionPolicy::Logarithmic).unwrap();
    store.save_dir(&dir.path().join("saved")).unwrap();
    let reopened = CheckpointStore::open_dir(&dir.path().join("saved")).unwrap();
    assert_eq!(replay_metagradient(&plan, &phi, reopened).unwrap().0, reference);
}

#[test]
fn retained_checkpoints_reproduce_later_states() {
    let (plan, _) = mlp_plan(16, UpdateRule::momentum(0.02, 0.9), 4, 30);
    let ones = DataWeights::ones(16);
    let (last, store) = plan.train_recorded(&ones, RetentionPolicy::two_level(30)).unwrap();
    let mut seen = 0;
    for t in store.retained_steps() {
        let s = store.load(t).unwrap();
        assert!(s.bit_eq(&plan.advance(&plan.initial_state(), &ones, t).unwrap()));
        assert!(plan.advance(&s, &ones, 30).unwrap().bit_eq(&last));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn ridge_training_reaches_normal_equations() {
    let (plan, _) = ridge_plan(40, 4, 0.5, 0.01, 600);
    let ones = vec![1.0; 40];
    let theta = plan.train(&DataWeights(ones.clone())).unwrap().params;
    let oracle = weighted_ridge(plan.dataset.examples(), &ones, 0.5);
    for (a, b) in theta.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    let w: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let theta = plan.train(&DataWeights(w.clone())).unwrap().params;
    let oracle = weighted_ridge(plan.dataset.examples(), &w, 0.5);
    for (a, b) in theta.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}
