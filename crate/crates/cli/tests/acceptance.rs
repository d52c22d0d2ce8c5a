//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use metagrad::data::split;
use metagrad::linalg::{cosine_similarity, max_rel_err, norm2};
use metagrad::{
    audit_budget, convex_ij_influence, fd_influence, grad_dot, ground_truth, replay_metagradient,
    replay_metagradients, sample_subsets, smoothness_probe, trak_lite, Activation, BatchSchedule, CheckpointStore,
    DataWeights, Generator, InfluenceVector, LdsReport, MeasurementFn, ModelFamily, ReplayOptions, RetentionPolicy,
    RetrainMode, SyntheticSpec, TaskLds, TaylorPredictor, TrainPlan, UpdateRule,
};

/// Coordinates below this fraction of the largest reference entry are
/// compared on that scale rather than their own.
const REL_FLOOR: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn replay(plan: &TrainPlan, phi: &MeasurementFn, policy: RetentionPolicy) -> metagrad::Result<InfluenceVector> {
    let (_, store) = plan.train_recorded(&DataWeights::ones(plan.n()), policy)?;
    Ok(replay_metagradient(plan, phi, store)?.0)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// 1. Replay equals central finite differences on a small network.
fn exactness() -> metagrad::Result<Outcome> {
    let pool = SyntheticSpec {
        generator: Generator::Moons,
        n: 65,
        dim: 2,
        noise: 0.2,
        classes: 2,
        seed: 3,
    }
    .generate()?;
    let (train, test) = split(&pool, 64)?;
    let phi = MeasurementFn::test_loss("test_0", test.get(0).clone());
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, rule) in [
        ("sgd", UpdateRule::sgd(0.05)),
        ("adam", UpdateRule::adam(0.01, 0.9, 0.999, 1e-8, 1e-6)),
    ] {
        let plan = TrainPlan::new(
            train.clone(),
            ModelFamily::mlp(&[2, 8, 1], Activation::Tanh),
            rule,
            BatchSchedule::new(5, 64, 16)?,
            1,
            50,
        )?;
        let exact = replay(&plan, &phi, RetentionPolicy::Logarithmic)?;
        let fd = fd_influence(&plan, &phi, 1e-4)?;
        let err = max_rel_err(&exact.values, &fd.values, REL_FLOOR);
        worst = worst.max(err);
        parts.push(format!("{name} max rel err {err:.2e}"));
    }
    Ok(outcome(worst <= 1e-5, format!("{} (tol 1e-5)", parts.join(", "))))
}

// 2. Ridge regression: replay against the closed-form infinitesimal jackknife.
fn convex() -> metagrad::Result<Outcome> {
    let (n, d, lambda) = (200, 10, 0.1);
    let pool = SyntheticSpec {
        generator: Generator::LinearRegression,
        n: n + 1,
        dim: d,
        noise: 0.5,
        classes: 2,
        seed: 3,
    }
    .generate()?;
    let (train, test) = split(&pool, n)?;
    let plan = TrainPlan::new(
        train,
        ModelFamily::WeightedLinearRegression { dim: d },
        UpdateRule::sgd(0.003).with_weight_decay(lambda),
        BatchSchedule::new(0, n, n)?,
        0,
        300,
    )?;
    let ones = DataWeights::ones(n);
    let s = plan.train(&ones)?;
    let mut g = plan.weighted_grad(&s, &ones, 0)?;
    for (gi, th) in g.iter_mut().zip(&s.params) {
        *gi += lambda * th;
    }
    let grad_norm = norm2(&g);
    let phi = MeasurementFn::test_loss("test_0", test.get(0).clone());
    let magic = replay(&plan, &phi, RetentionPolicy::Logarithmic)?;
    let ij = convex_ij_influence(&plan, &phi)?;
    let cos = cosine_similarity(&magic.values, &ij.values);
    let err = max_rel_err(&magic.values, &ij.values, REL_FLOOR);
    Ok(outcome(
        grad_norm <= 1e-10 && cos >= 0.999 && err <= 1e-3,
        format!("gradient norm {grad_norm:.1e}, cosine {cos:.12}, max rel err {err:.2e}"),
    ))
}

struct DeskTask {
    name: &'static str,
    plan: TrainPlan,
    phis: Vec<MeasurementFn>,
    magic: Vec<InfluenceVector>,
}

fn desk_task(name: &'static str, model: ModelFamily) -> metagrad::Result<DeskTask> {
    let pool = SyntheticSpec {
        generator: Generator::Moons,
        n: 1010,
        dim: 2,
        noise: 0.3,
        classes: 2,
        seed: 7,
    }
    .generate()?;
    let (train, test) = split(&pool, 1000)?;
    let plan = TrainPlan::with_epochs(train, model, UpdateRule::sgd(0.005), 100, 1, 2, 20)?;
    let phis: Vec<MeasurementFn> = (0..10)
        .map(|k| MeasurementFn::test_loss(format!("test_{k}"), test.get(k).clone()))
        .collect();
    let (_, store) = plan.train_recorded(&DataWeights::ones(1000), RetentionPolicy::Logarithmic)?;
    let (magic, _) = replay_metagradients(&plan, &phis, store, ReplayOptions::default())?;
    Ok(DeskTask {
        name,
        plan,
        phis,
        magic,
    })
}

fn report(task: &DeskTask, method: &str, scores: &[InfluenceVector], p: f64) -> metagrad::Result<LdsReport> {
    let subsets = sample_subsets(task.plan.n(), p, 64, 11)?;
    let truth = ground_truth(&task.plan, &task.phis, &subsets, RetrainMode::SameSchedule)?;
    let tasks = scores
        .iter()
        .zip(&truth)
        .zip(&task.phis)
        .map(|((v, y), phi)| {
            let pred = TaylorPredictor::from(v);
            let predicted = subsets
                .iter()
                .map(|s| pred.predict(&s.weights.0))
                .collect::<metagrad::Result<Vec<_>>>()?;
            TaskLds::new(phi.id.clone(), predicted, y.clone())
        })
        .collect::<metagrad::Result<Vec<_>>>()?;
    LdsReport::new(method, p, tasks, 1000, 0.95, 11)
}

fn mean_of(r: &LdsReport) -> f64 {
    r.mean.unwrap_or(f64::NAN)
}

// 3. MAGIC LDS at p = 1% on both desk tasks.
fn lds_desk(tasks: &[DeskTask]) -> metagrad::Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for t in tasks {
        let r = report(t, "magic", &t.magic, 0.01)?;
        let m = mean_of(&r);
        pass &= m >= 0.95 && r.undefined_tasks().is_empty();
        parts.push(format!("{} {m:.4}", t.name));
    }
    Ok(outcome(pass, format!("mean LDS at p = 1%: {} (min 0.95)", parts.join(", "))))
}

// 4. LDS does not rise with the drop fraction beyond bootstrap noise.
fn degradation(task: &DeskTask) -> metagrad::Result<Outcome> {
    let mut reports = Vec::new();
    for p in [0.01, 0.05, 0.1, 0.2] {
        reports.push(report(task, "magic", &task.magic, p)?);
    }
    let mut pass = true;
    for w in reports.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ca, cb) = (a.ci.expect("ci"), b.ci.expect("ci"));
        pass &= mean_of(b) <= mean_of(a) || cb.lower <= ca.upper;
    }
    let parts: Vec<String> = reports
        .iter()
        .map(|r| {
            let ci = r.ci.expect("ci");
            format!("{}: {:.4} [{:.4}, {:.4}]", r.drop_fraction, mean_of(r), ci.lower, ci.upper)
        })
        .collect();
    Ok(outcome(pass, format!("{} on {}", parts.join("; "), task.name)))
}

// 5. MAGIC ahead of both baselines by at least 0.3 at p = 1%.
fn baseline_gap(task: &DeskTask) -> metagrad::Result<Outcome> {
    let trak = task
        .phis
        .iter()
        .map(|phi| trak_lite(&task.plan, phi, 64, 0))
        .collect::<metagrad::Result<Vec<_>>>()?;
    let gd = task
        .phis
        .iter()
        .map(|phi| grad_dot(&task.plan, phi))
        .collect::<metagrad::Result<Vec<_>>>()?;
    let m = mean_of(&report(task, "magic", &task.magic, 0.01)?);
    let t = mean_of(&report(task, "trak-lite", &trak, 0.01)?);
    let g = mean_of(&report(task, "grad-dot", &gd, 0.01)?);
    Ok(outcome(
        m - t >= 0.3 && m - g >= 0.3,
        format!(
            "{}: magic {m:.4}, trak-lite {t:.4} (gap {:.4}), grad-dot {g:.4} (gap {:.4})",
            task.name,
            m - t,
            m - g
        ),
    ))
}

// 6. Budget audit at T = 64, 256, 1024 and policy independence.
fn cost_envelope() -> metagrad::Result<Outcome> {
    let ds = SyntheticSpec {
        generator: Generator::Moons,
        n: 17,
        dim: 2,
        noise: 0.2,
        classes: 2,
        seed: 5,
    }
    .generate()?;
    let (train, test) = split(&ds, 16)?;
    let phi = MeasurementFn::test_loss("test_0", test.get(0).clone());
    let mut pass = true;
    let mut parts = Vec::new();
    for steps in [64, 256, 1024] {
        let plan = TrainPlan::new(
            train.clone(),
            ModelFamily::mlp(&[2, 4, 1], Activation::Tanh),
            UpdateRule::momentum(0.01, 0.9),
            BatchSchedule::new(2, 16, 4)?,
            3,
            steps,
        )?;
        let (_, store) = plan.train_recorded(&DataWeights::ones(16), RetentionPolicy::Logarithmic)?;
        let (log_infl, budget) = replay_metagradient(&plan, &phi, store)?;
        let audit = audit_budget(&budget, steps);
        let all = replay(&plan, &phi, RetentionPolicy::RetainAll)?;
        let same = bits_equal(&all.values, &log_infl.values)
            && all.center_output.to_bits() == log_infl.center_output.to_bits();
        pass &= audit.is_ok() && same;
        parts.push(format!(
            "T={steps}: recompute {}/{}, peak {}/{}{}",
            budget.recompute_steps_total,
            steps * metagrad::checkpoint::ceil_log2(steps) + steps,
            budget.peak_live_states,
            metagrad::checkpoint::LIVE_STATE_FACTOR * metagrad::checkpoint::ceil_log2(steps),
            if same { ", bit-identical" } else { ", POLICY MISMATCH" }
        ));
    }
    Ok(outcome(pass, parts.join("; ")))
}

// 7. Center identity and exact scaling.
fn taylor_center(task: &DeskTask) -> metagrad::Result<Outcome> {
    let mut pass = true;
    for v in &task.magic {
        let pred = TaylorPredictor::from(v);
        pass &= pred.predict(&vec![1.0; v.len()])?.to_bits() == v.center_output.to_bits();
    }
    let phi = &task.phis[0];
    let base = &task.magic[0];
    let scales = [2.0, -0.25, 3.0, -0.7, 1e-3];
    for c in scales {
        let scaled = replay(&task.plan, &phi.clone().scaled(c), RetentionPolicy::Logarithmic)?;
        let expect: Vec<f64> = base.values.iter().map(|b| c * b).collect();
        pass &= bits_equal(&scaled.values, &expect) && scaled.center_output == c * base.center_output;
    }
    Ok(outcome(
        pass,
        format!("predict(1) bit-exact for {} measurements; influence scales bit-exactly for c in {scales:?}", task.magic.len()),
    ))
}

// 8. Doubling ratio and extrapolated slope of the smoothness probe.
fn smoothness(task: &DeskTask) -> metagrad::Result<Outcome> {
    let phi = &task.phis[0];
    let infl = &task.magic[0].values;
    let i = (0..infl.len())
        .max_by(|&a, &b| infl[a].abs().total_cmp(&infl[b].abs()))
        .expect("non-empty");
    let probe = smoothness_probe(&task.plan, phi, i, &[0.0, 0.01, 0.02, 0.1, 0.2, 0.5, 1.0])?;
    let ratios = probe.doubling_ratios();
    let (eps, ratio) = ratios[0];
    let slope = probe.extrapolated_slope().expect("paired grid");
    let err = (slope - infl[i]).abs() / infl[i].abs();
    Ok(outcome(
        (1.8..=2.2).contains(&ratio) && err <= 1e-3,
        format!("example {i}: ratio at eps={eps} is {ratio:.6}, slope rel err {err:.2e}"),
    ))
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metagrad"))
}

fn run_pipeline(config: &Path, out: &Path) -> Result<(), String> {
    for cmd in ["train", "attribute", "lds"] {
        let o = cli()
            .args([cmd, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable output") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") || p.ends_with("manifest.json") {
                out.push(p.strip_prefix(dir).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

// 9. Byte-identical pipeline reruns and bit-identical checkpoint replay.
fn determinism() -> metagrad::Result<Outcome> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/moons-mlp.toml");
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = run_pipeline(&config, &a).and_then(|_| run_pipeline(&config, &b)) {
        return Ok(outcome(false, format!("pipeline failed: {e}")));
    }
    let files = csv_files(&a);
    let identical = files == csv_files(&b)
        && files
            .iter()
            .all(|f| std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok());

    let ckpt = a.join("moons-mlp/run/checkpoints");
    let store = CheckpointStore::open_dir(&ckpt)?;
    let final_state = store.final_state()?;
    let task = desk_task("moons-mlp", ModelFamily::mlp(&[2, 8, 1], Activation::Tanh))?;
    let ones = DataWeights::ones(task.plan.n());
    let retained = store.retained_steps();
    let mut fidelity = store.plan_fingerprint() == task.plan.fingerprint();
    for (k, &t) in retained.iter().enumerate() {
        let s = store.load(t)?;
        let next = retained.get(k + 1).copied();
        if let Some(u) = next {
            fidelity &= task.plan.advance(&s, &ones, u)?.bit_eq(&store.load(u)?);
        }
        fidelity &= task.plan.advance(&s, &ones, task.plan.steps)?.bit_eq(&final_state);
    }
    Ok(outcome(
        identical && fidelity,
        format!(
            "{} output files byte-identical: {identical}; {} checkpoints replay bit-identically: {fidelity}",
            files.len(),
            retained.len()
        ),
    ))
}

fn main() {
    let start = Instant::now();
    let desk = [
        desk_task("logistic", ModelFamily::LogisticRegression { dim: 2 }),
        desk_task("mlp", ModelFamily::mlp(&[2, 8, 1], Activation::Tanh)),
    ];
    let desk: Vec<DeskTask> = match desk.into_iter().collect::<metagrad::Result<_>>() {
        Ok(d) => d,
        Err(e) => {
            println!("desk tasks failed to build: {e}");
            std::process::exit(1);
        }
    };
    let mlp = &desk[1];
    let checks: Vec<(&str, Box<dyn Fn() -> metagrad::Result<Outcome>>)> = vec![
        ("exactness vs finite differences", Box::new(exactness)),
        ("ridge vs closed-form influence", Box::new(convex)),
        ("desk-scale LDS", Box::new(|| lds_desk(&desk))),
        ("LDS trend over drop fraction", Box::new(|| degradation(mlp))),
        ("baseline ordering", Box::new(|| baseline_gap(mlp))),
        ("cost envelope", Box::new(cost_envelope)),
        ("Taylor center and scaling", Box::new(|| taylor_center(mlp))),
        ("smoothness probe", Box::new(|| smoothness(mlp))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let t0 = Instant::now();
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} [{}] {name}: {} ({:.1}s)",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        checks.len() - failed,
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
