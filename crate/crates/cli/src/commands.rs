//! The five subcommands. Every output lives under `<out>/<task_id>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use metagrad::format::{BlockFile, BlockTag};
use metagrad::linalg::max_rel_err;
use metagrad::{
    budget_report, ground_truth, replay_metagradient, sample_subsets, smoothness_probe, BudgetReport,
    CheckpointStore, DataWeights, Error, InfluenceVector, LdsReport, TaskLds, TaylorPredictor,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Experiment, LoadedConfig, Method};

pub struct Ctx {
    pub loaded: LoadedConfig,
    pub exp: Experiment,
    pub task_dir: PathBuf,
}

impl Ctx {
    pub fn new(loaded: LoadedConfig, out_root: &Path) -> anyhow::Result<Self> {
        let exp = Experiment::build(&loaded)?;
        let task_dir = out_root.join(&loaded.config.task_id);
        Ok(Ctx { loaded, exp, task_dir })
    }

    fn run_dir(&self) -> PathBuf {
        self.task_dir.join("run")
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir().join("checkpoints")
    }

    fn attribution_dir(&self) -> PathBuf {
        self.task_dir.join("attribution")
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub task_id: String,
    pub config_hash: String,
    pub plan_fingerprint: String,
    pub steps: usize,
    pub n_train: usize,
    pub param_dim: usize,
    pub retained_steps: Vec<usize>,
    /// sha256 over the checkpoint directory, file names and bytes in name order.
    pub content_hash: String,
    pub center_outputs: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct Timings {
    train_seconds: f64,
    save_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn hash_dir(dir: &Path) -> anyhow::Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().expect("file name").as_encoded_bytes());
        h.update([0]);
        h.update(fs::read(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn train(ctx: &Ctx) -> anyhow::Result<()> {
    let plan = &ctx.exp.plan;
    let policy = ctx.loaded.config.retention(plan.steps);
    let run = ctx.run_dir();
    let ckpt = ctx.checkpoint_dir();
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt).with_context(|| format!("clearing {}", ckpt.display()))?;
    }
    fs::create_dir_all(&run)?;

    let t0 = Instant::now();
    let (state, store) = plan.train_recorded(&DataWeights::ones(plan.n()), policy)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    store.save_dir(&ckpt)?;
    let save_seconds = t1.elapsed().as_secs_f64();

    let center_outputs = ctx
        .exp
        .phis
        .iter()
        .map(|phi| Ok((phi.id.clone(), phi.measure(&plan.model, &state.params)?)))
        .collect::<metagrad::Result<_>>()?;
    let manifest = Manifest {
        task_id: ctx.loaded.config.task_id.clone(),
        config_hash: ctx.loaded.config.hash(),
        plan_fingerprint: plan.fingerprint().to_string(),
        steps: plan.steps,
        n_train: plan.n(),
        param_dim: plan.model.param_dim(),
        retained_steps: store.retained_steps(),
        content_hash: hash_dir(&ckpt)?,
        center_outputs,
    };
    write_json(&run.join("manifest.json"), &manifest)?;
    write_json(
        &run.join("timings.json"),
        &Timings {
            train_seconds,
            save_seconds,
        },
    )?;
    println!(
        "trained {} steps, {} checkpoints retained; content hash {}",
        plan.steps,
        manifest.retained_steps.len(),
        manifest.content_hash
    );
    Ok(())
}

fn read_manifest(ctx: &Ctx) -> anyhow::Result<Manifest> {
    let path = ctx.run_dir().join("manifest.json");
    let bytes = fs::read(&path).with_context(|| format!("no run at {}; run `train` first", path.display()))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.plan_fingerprint != ctx.exp.plan.fingerprint() {
        return Err(ConfigError(format!(
            "run at {} was trained from a different configuration (plan fingerprint mismatch)",
            ctx.run_dir().display()
        ))
        .into());
    }
    Ok(m)
}

#[derive(Serialize)]
struct BudgetFile<'a> {
    measurement: &'a str,
    plan_fingerprint: &'a str,
    measure_fingerprint: &'a str,
    budget: metagrad::ReplayBudget,
    audit: BudgetReport,
}

pub fn attribute(ctx: &Ctx) -> anyhow::Result<()> {
    read_manifest(ctx)?;
    let dir = ctx.attribution_dir();
    fs::create_dir_all(&dir)?;
    let mut failed = Vec::new();
    let mut replay_seconds = Vec::new();
    for phi in &ctx.exp.phis {
        let store = CheckpointStore::open_dir(&ctx.checkpoint_dir())?;
        let t0 = Instant::now();
        let (iv, budget) = replay_metagradient(&ctx.exp.plan, phi, store)?;
        replay_seconds.push((phi.id.clone(), t0.elapsed().as_secs_f64()));
        iv.write_csv(&dir.join(format!("{}.csv", phi.id)), Method::Magic.name())?;
        iv.to_block_file(ctx.exp.plan.steps)
            .write(&dir.join(format!("{}.influence", phi.id)))?;
        let audit = budget_report(&budget, ctx.exp.plan.steps);
        if !audit.passed {
            failed.push(phi.id.clone());
        }
        println!(
            "{}: recomputed {} steps (bound {}), peak live states {} (bound {}){}",
            phi.id,
            audit.recompute_steps_total,
            audit.recompute_bound,
            audit.peak_live_states,
            audit.live_state_bound,
            if audit.passed { "" } else { "  BUDGET EXCEEDED" }
        );
        write_json(
            &dir.join(format!("{}.budget.json", phi.id)),
            &BudgetFile {
                measurement: &phi.id,
                plan_fingerprint: &iv.plan_fingerprint,
                measure_fingerprint: &iv.measure_fingerprint,
                budget,
                audit,
            },
        )?;
    }
    // Wall time includes rematerialization; kept apart from the step counters.
    write_json(&dir.join("timings.json"), &replay_seconds)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Budget(format!("replay budget exceeded for {}", failed.join(", "))).into())
    }
}

fn load_influence(ctx: &Ctx, id: &str) -> anyhow::Result<TaylorPredictor> {
    let path = ctx.attribution_dir().join(format!("{id}.influence"));
    let file = BlockFile::read(&path).with_context(|| format!("missing {}; run `attribute` first", path.display()))?;
    let block = |tag: BlockTag| {
        file.blocks
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("missing {tag:?} block"),
            })
    };
    let values = block(BlockTag::Influence)?;
    let center = block(BlockTag::CenterOutput)?;
    if values.len() != ctx.exp.plan.n() || center.len() != 1 {
        return Err(Error::Format {
            path,
            reason: "influence block does not match the training set".into(),
        }
        .into());
    }
    Ok(TaylorPredictor::new(values, center[0]))
}

#[derive(Serialize)]
struct TaskSummary<'a> {
    measurement: &'a str,
    lds: Option<f64>,
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    method: &'a str,
    mean_lds: Option<f64>,
    ci_lower: Option<f64>,
    ci_upper: Option<f64>,
    tasks: Vec<TaskSummary<'a>>,
    undefined: Vec<&'a str>,
}

#[derive(Serialize)]
struct Bootstrap {
    resamples: usize,
    level: f64,
    seed: u64,
}

#[derive(Serialize)]
struct DropSummary<'a> {
    task_id: &'a str,
    drop_fraction: f64,
    subsets: usize,
    subset_seed: u64,
    mode: metagrad::RetrainMode,
    bootstrap: Bootstrap,
    methods: Vec<MethodSummary<'a>>,
}

pub fn lds(ctx: &Ctx) -> anyhow::Result<()> {
    read_manifest(ctx)?;
    let cfg = &ctx.loaded.config.lds;
    let plan = &ctx.exp.plan;
    let phis = &ctx.exp.phis;
    let n = plan.n();

    let mut predictors: Vec<(Method, Vec<TaylorPredictor>)> = Vec::new();
    for &method in &cfg.methods {
        let preds = match ctx.loaded.config.baseline(method) {
            None => phis.iter().map(|phi| load_influence(ctx, &phi.id)).collect::<anyhow::Result<_>>()?,
            Some(kind) => phis
                .iter()
                .map(|phi| Ok(TaylorPredictor::from(&kind.scores(plan, phi)?)))
                .collect::<metagrad::Result<_>>()?,
        };
        predictors.push((method, preds));
    }

    let mut table = csv::Writer::from_path(ctx.task_dir.join("lds_summary.csv"))?;
    table.write_record(["method", "drop_fraction", "mean_lds", "ci_lower", "ci_upper", "undefined_tasks"])?;
    let mut undefined_any = Vec::new();
    for &p in &cfg.drop_fractions {
        let subsets = sample_subsets(n, p, cfg.subsets, cfg.seed)?;
        let truth = ground_truth(plan, phis, &subsets, cfg.mode)?;
        let dir = ctx.task_dir.join(format!("dropfrac_{p}"));
        fs::create_dir_all(&dir)?;

        let mut sw = csv::Writer::from_path(dir.join("subsets.csv"))?;
        sw.write_record(["subset_id", "dropped"])?;
        for s in &subsets {
            let dropped: Vec<String> = s.dropped.iter().map(usize::to_string).collect();
            sw.write_record([s.index.to_string(), dropped.join(" ")])?;
        }
        sw.flush()?;

        let mut reports = Vec::new();
        for (method, preds) in &predictors {
            let mut tasks = Vec::new();
            for (k, (phi, pred)) in phis.iter().zip(preds).enumerate() {
                let predicted = subsets
                    .iter()
                    .map(|s| pred.predict(&s.weights.0))
                    .collect::<metagrad::Result<Vec<f64>>>()?;
                tasks.push(TaskLds::new(phi.id.clone(), predicted, truth[k].clone())?);
            }
            let report = LdsReport::new(method.name(), p, tasks, cfg.resamples, cfg.level, cfg.seed)?;
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", method.name())))?;
            w.write_record(["measurement", "subset_id", "predicted", "true"])?;
            for t in &report.tasks {
                for (j, (a, b)) in t.predicted.iter().zip(&t.truth).enumerate() {
                    w.write_record([t.measurement.clone(), j.to_string(), fmt(*a), fmt(*b)])?;
                }
            }
            w.flush()?;
            reports.push(report);
        }

        let methods: Vec<MethodSummary> = reports
            .iter()
            .map(|r| MethodSummary {
                method: &r.method,
                mean_lds: r.mean,
                ci_lower: r.ci.map(|c| c.lower),
                ci_upper: r.ci.map(|c| c.upper),
                tasks: r
                    .tasks
                    .iter()
                    .map(|t| TaskSummary {
                        measurement: &t.measurement,
                        lds: t.rho,
                    })
                    .collect(),
                undefined: r.undefined_tasks(),
            })
            .collect();
        for m in &methods {
            let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
            table.write_record([
                m.method.to_string(),
                fmt(p),
                opt(m.mean_lds),
                opt(m.ci_lower),
                opt(m.ci_upper),
                m.undefined.join(" "),
            ])?;
            println!(
                "p = {p:<5} {:<18} mean LDS {}  95% CI [{}, {}]{}",
                m.method,
                m.mean_lds.map_or("undefined".into(), |v| format!("{v:.4}")),
                m.ci_lower.map_or("-".into(), |v| format!("{v:.4}")),
                m.ci_upper.map_or("-".into(), |v| format!("{v:.4}")),
                if m.undefined.is_empty() {
                    String::new()
                } else {
                    format!("  undefined for {}", m.undefined.join(", "))
                }
            );
            for u in &m.undefined {
                undefined_any.push(format!("{} at p = {p} ({})", u, m.method));
            }
        }
        write_json(
            &dir.join("summary.json"),
            &DropSummary {
                task_id: &ctx.loaded.config.task_id,
                drop_fraction: p,
                subsets: cfg.subsets,
                subset_seed: cfg.seed,
                mode: cfg.mode,
                bootstrap: Bootstrap {
                    resamples: cfg.resamples,
                    level: cfg.level,
                    seed: cfg.seed,
                },
                methods,
            },
        )?;
    }
    table.flush()?;
    if undefined_any.is_empty() {
        Ok(())
    } else {
        Err(Error::UndefinedMetric(format!("LDS undefined for {}", undefined_any.join("; "))).into())
    }
}

fn replay_in_memory(ctx: &Ctx, phi: &metagrad::MeasurementFn) -> anyhow::Result<InfluenceVector> {
    let plan = &ctx.exp.plan;
    let (_, store) = plan.train_recorded(&DataWeights::ones(plan.n()), ctx.loaded.config.retention(plan.steps))?;
    Ok(replay_metagradient(plan, phi, store)?.0)
}

pub fn gradcheck(ctx: &Ctx) -> anyhow::Result<()> {
    let g = &ctx.loaded.config.gradcheck;
    fs::create_dir_all(&ctx.task_dir)?;
    let mut w = csv::Writer::from_path(ctx.task_dir.join("gradcheck.csv"))?;
    w.write_record(["measurement", "h", "floor", "max_rel_err", "tolerance", "pass"])?;
    let mut failed = Vec::new();
    println!("{:<16} {:>12} {:>10}  result", "measurement", "max rel err", "tolerance");
    for phi in &ctx.exp.phis {
        let exact = replay_in_memory(ctx, phi)?;
        let fd = metagrad::fd_influence(&ctx.exp.plan, phi, g.h)?;
        let err = max_rel_err(&exact.values, &fd.values, g.floor);
        let pass = err <= g.tolerance;
        if !pass {
            failed.push(phi.id.clone());
        }
        println!(
            "{:<16} {:>12.3e} {:>10.1e}  {}",
            phi.id,
            err,
            g.tolerance,
            if pass { "pass" } else { "FAIL" }
        );
        w.write_record([
            phi.id.clone(),
            fmt(g.h),
            fmt(g.floor),
            fmt(err),
            fmt(g.tolerance),
            pass.to_string(),
        ])?;
    }
    w.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed for {}", failed.join(", "))
    }
}

#[derive(Serialize)]
struct ProbeSummary<'a> {
    measurement: &'a str,
    index: usize,
    center_output: f64,
    influence: f64,
    extrapolated_slope: Option<f64>,
    slope_rel_err: Option<f64>,
    doubling_ratios: Vec<(f64, f64)>,
}

pub fn probe(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.loaded.config.probe;
    let phi = match &cfg.measurement {
        Some(id) => ctx.exp.phi(id)?,
        None => &ctx.exp.phis[0],
    };
    let plan = &ctx.exp.plan;
    if cfg.index >= plan.n() {
        return Err(ConfigError(format!("probe.index {} out of range for {} examples", cfg.index, plan.n())).into());
    }
    let probe = smoothness_probe(plan, phi, cfg.index, &cfg.eps)?;
    let influence = replay_in_memory(ctx, phi)?.values[cfg.index];
    fs::create_dir_all(&ctx.task_dir)?;
    let stem = format!("probe_{}_{}", phi.id, cfg.index);
    let mut w = csv::Writer::from_path(ctx.task_dir.join(format!("{stem}.csv")))?;
    w.write_record(["eps", "delta", "error"])?;
    for (e, d) in probe.eps.iter().zip(&probe.delta) {
        match d {
            Ok(v) => w.write_record([fmt(*e), fmt(*v), String::new()])?,
            Err(msg) => w.write_record([fmt(*e), String::new(), msg.clone()])?,
        }
    }
    w.flush()?;
    let slope = probe.extrapolated_slope();
    let summary = ProbeSummary {
        measurement: &phi.id,
        index: cfg.index,
        center_output: probe.center_output,
        influence,
        extrapolated_slope: slope,
        slope_rel_err: slope.map(|s| (s - influence).abs() / influence.abs()),
        doubling_ratios: probe.doubling_ratios(),
    };
    for (e, r) in &summary.doubling_ratios {
        println!("eps {e:<8} Delta(2 eps) / Delta(eps) = {r:.6}");
    }
    if let (Some(s), Some(r)) = (summary.extrapolated_slope, summary.slope_rel_err) {
        println!("extrapolated slope {s:.9e}, influence {influence:.9e}, rel. err {r:.2e}");
    }
    write_json(&ctx.task_dir.join(format!("{stem}.json")), &summary)
}
