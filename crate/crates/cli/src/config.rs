//! Experiment configuration: a strict TOML schema plus `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use metagrad::data::split;
use metagrad::{
    Activation, BaselineKind, BatchSchedule, Dataset, Generator, LrSchedule, MeasurementFn, ModelFamily,
    RetentionPolicy, RetrainMode, SyntheticSpec, TaskKind, TrainPlan, UpdateRule,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Invalid or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task_id: String,
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub measurements: MeasurementConfig,
    #[serde(default)]
    pub lds: LdsConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated pool: the first `n_train` examples train, the next
    /// `n_test` are candidates for measurements.
    Synthetic {
        generator: Generator,
        n_train: usize,
        n_test: usize,
        #[serde(default = "two")]
        dim: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "two")]
        classes: usize,
        seed: u64,
    },
    /// CSV files with a header row and the target in the last column.
    /// Relative paths resolve against the config file's directory.
    Csv {
        train: PathBuf,
        test: PathBuf,
        /// Omitted for regression.
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn two() -> usize {
    2
}
fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    LinearRegression,
    LogisticRegression,
    /// Input and output widths follow from the data.
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    #[default]
    Constant,
    OneCycle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: RuleName,
    /// Step size applied to the summed (not averaged) batch gradient.
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub eps_root: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleName,
    #[serde(default)]
    pub start_mult: Option<f64>,
    #[serde(default)]
    pub end_mult: Option<f64>,
    #[serde(default)]
    pub peak_frac: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetentionName {
    #[default]
    Logarithmic,
    TwoLevel,
    RetainAll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub batch_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub retention: RetentionName,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    /// One test-loss measurement `test_<k>` per listed test example.
    #[serde(default)]
    pub test_indices: Vec<usize>,
    /// Adds `mean_test`, the mean loss over the whole test set.
    #[serde(default)]
    pub mean_test_loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Magic,
    TrakLite,
    GradDot,
    ConvexIj,
    FiniteDifference,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Magic => "magic",
            Method::TrakLite => "trak-lite",
            Method::GradDot => "grad-dot",
            Method::ConvexIj => "convex-ij",
            Method::FiniteDifference => "finite-difference",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsConfig {
    pub drop_fractions: Vec<f64>,
    pub subsets: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub resamples: usize,
    pub level: f64,
    pub projection_dim: usize,
    pub projection_seed: u64,
    pub mode: RetrainMode,
}

impl Default for LdsConfig {
    fn default() -> Self {
        LdsConfig {
            drop_fractions: vec![0.01, 0.05, 0.1, 0.2],
            subsets: 64,
            seed: 0,
            methods: vec![Method::Magic, Method::TrakLite, Method::GradDot],
            resamples: metagrad::stats::DEFAULT_RESAMPLES,
            level: 0.95,
            projection_dim: 64,
            projection_seed: 0,
            mode: RetrainMode::SameSchedule,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Relative errors are taken against `max(|ref_i|, floor * max|ref|)`.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Measurement id; the first configured measurement when absent.
    pub measurement: Option<String>,
    pub index: usize,
    pub eps: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            measurement: None,
            index: 0,
            eps: vec![0.0, 1e-3, 2e-3, 1e-2, 2e-2, 0.1, 0.2, 0.5, 1.0],
        }
    }
}

/// Splits `key=value`; the value is parsed as a TOML value, falling back to
/// a bare string.
fn parse_override(s: &str) -> anyhow::Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> anyhow::Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override path `{}` crosses a non-table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// A parsed configuration and the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            apply_override(&mut table, &key, value)?;
        }
        let config: ExperimentConfig = if overrides.is_empty() {
            toml::from_str(&text)
        } else {
            table.try_into()
        }
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

fn check_unit_open(name: &str, v: Option<f64>) -> anyhow::Result<()> {
    match v {
        Some(x) if !(0.0..1.0).contains(&x) => Err(config_err(format!("{name} = {x} must lie in [0, 1)"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.task_id.is_empty()
            || !self
                .task_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(config_err(format!(
                "task_id `{}` must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.task_id
            )));
        }
        let o = &self.optimizer;
        if o.momentum.is_some() && o.kind != RuleName::Momentum {
            return Err(config_err("optimizer.momentum only applies to kind = \"momentum\""));
        }
        if (o.beta1.is_some() || o.beta2.is_some() || o.eps.is_some() || o.eps_root.is_some())
            && o.kind != RuleName::Adam
        {
            return Err(config_err("optimizer beta1/beta2/eps/eps_root only apply to kind = \"adam\""));
        }
        if (o.start_mult.is_some() || o.end_mult.is_some() || o.peak_frac.is_some())
            && o.schedule != ScheduleName::OneCycle
        {
            return Err(config_err(
                "optimizer start_mult/end_mult/peak_frac only apply to schedule = \"one-cycle\"",
            ));
        }
        check_unit_open("optimizer.momentum", o.momentum)?;
        check_unit_open("optimizer.beta1", o.beta1)?;
        check_unit_open("optimizer.beta2", o.beta2)?;
        if self.measurements.test_indices.is_empty() && !self.measurements.mean_test_loss {
            return Err(config_err("no measurements configured"));
        }
        let l = &self.lds;
        if l.subsets < 2 {
            return Err(config_err("lds.subsets must be >= 2"));
        }
        if !(l.level > 0.0 && l.level < 1.0) {
            return Err(config_err("lds.level must lie in (0, 1)"));
        }
        if l.resamples == 0 {
            return Err(config_err("lds.resamples must be >= 1"));
        }
        if l.projection_dim == 0 {
            return Err(config_err("lds.projection_dim must be >= 1"));
        }
        if let Some(p) = l.drop_fractions.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(config_err(format!("lds drop fraction {p} not in (0, 1)")));
        }
        let g = &self.gradcheck;
        if !(g.h > 0.0 && g.tolerance > 0.0 && g.floor >= 0.0) {
            return Err(config_err("gradcheck h and tolerance must be > 0, floor >= 0"));
        }
        Ok(())
    }

    /// Digest of the resolved configuration, output directory excluded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn retention(&self, steps: usize) -> RetentionPolicy {
        match self.training.retention {
            RetentionName::Logarithmic => RetentionPolicy::Logarithmic,
            RetentionName::TwoLevel => RetentionPolicy::two_level(steps),
            RetentionName::RetainAll => RetentionPolicy::RetainAll,
        }
    }

    pub fn baseline(&self, method: Method) -> Option<BaselineKind> {
        match method {
            Method::Magic => None,
            Method::TrakLite => Some(BaselineKind::TrakLite {
                projection_dim: self.lds.projection_dim,
                seed: self.lds.projection_seed,
            }),
            Method::GradDot => Some(BaselineKind::GradDot),
            Method::ConvexIj => Some(BaselineKind::ConvexIj),
            Method::FiniteDifference => Some(BaselineKind::FiniteDifference { h: self.gradcheck.h }),
        }
    }
}

/// Everything derived from a configuration: the plan and the measurements.
pub struct Experiment {
    pub plan: TrainPlan,
    pub phis: Vec<MeasurementFn>,
}

fn rule(o: &OptimizerConfig, steps: usize) -> UpdateRule {
    let base = match o.kind {
        RuleName::Sgd => UpdateRule::sgd(o.lr),
        RuleName::Momentum => UpdateRule::momentum(o.lr, o.momentum.unwrap_or(0.9)),
        RuleName::Adam => UpdateRule::adam(
            o.lr,
            o.beta1.unwrap_or(0.9),
            o.beta2.unwrap_or(0.999),
            o.eps.unwrap_or(1e-8),
            o.eps_root.unwrap_or(1e-6),
        ),
    };
    let base = base.with_weight_decay(o.weight_decay);
    match o.schedule {
        ScheduleName::Constant => base,
        ScheduleName::OneCycle => base.with_schedule(LrSchedule::OneCycle {
            peak_lr: o.lr,
            start_mult: o.start_mult.unwrap_or(0.1),
            end_mult: o.end_mult.unwrap_or(0.01),
            peak_frac: o.peak_frac.unwrap_or(0.25),
            total_steps: steps,
        }),
    }
}

fn load_data(cfg: &DataConfig, base: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::Synthetic {
            generator,
            n_train,
            n_test,
            dim,
            noise,
            classes,
            seed,
        } => {
            if *n_test == 0 {
                return Err(config_err("data.n_test must be >= 1"));
            }
            let pool = SyntheticSpec {
                generator: *generator,
                n: n_train + n_test,
                dim: *dim,
                noise: *noise,
                classes: *classes,
                seed: *seed,
            }
            .generate()
            .map_err(|e| config_err(format!("data: {e}")))?;
            split(&pool, *n_train).map_err(|e| config_err(format!("data: {e}")))
        }
        DataConfig::Csv { train, test, classes } => {
            let task = match classes {
                Some(k) => TaskKind::Classification { classes: *k },
                None => TaskKind::Regression,
            };
            let read = |p: &PathBuf| {
                let full = base.join(p);
                Dataset::from_csv(&full, task).map_err(|e| config_err(format!("data file {}: {e}", full.display())))
            };
            Ok((read(train)?, read(test)?))
        }
    }
}

fn model(cfg: &ModelConfig, train: &Dataset) -> anyhow::Result<ModelFamily> {
    let dim = train.feature_dim();
    Ok(match cfg {
        ModelConfig::LinearRegression => ModelFamily::WeightedLinearRegression { dim },
        ModelConfig::LogisticRegression => ModelFamily::LogisticRegression { dim },
        ModelConfig::Mlp { hidden, activation } => {
            let out = match train.task() {
                TaskKind::Regression => 1,
                TaskKind::Classification { classes: 2 } => 1,
                TaskKind::Classification { classes } => classes,
            };
            let mut widths = vec![dim];
            widths.extend(hidden);
            widths.push(out);
            ModelFamily::mlp(&widths, *activation)
        }
    })
}

impl Experiment {
    pub fn build(loaded: &LoadedConfig) -> anyhow::Result<Self> {
        let cfg = &loaded.config;
        let (train, test) = load_data(&cfg.data, &loaded.base_dir)?;
        let model = model(&cfg.model, &train)?;
        let t = &cfg.training;
        let schedule = BatchSchedule::new(t.batch_seed, train.len(), t.batch_size)
            .map_err(|e| config_err(format!("training: {e}")))?;
        let steps = t.epochs * schedule.batches_per_epoch();
        let plan = TrainPlan::new(train, model, rule(&cfg.optimizer, steps), schedule, t.init_seed, steps)
            .map_err(|e| config_err(format!("{e}")))?;
        let mut phis = Vec::new();
        for &k in &cfg.measurements.test_indices {
            if k >= test.len() {
                return Err(config_err(format!(
                    "measurement test index {k} out of range for {} test examples",
                    test.len()
                )));
            }
            phis.push(MeasurementFn::test_loss(format!("test_{k}"), test.get(k).clone()));
        }
        if cfg.measurements.mean_test_loss {
            phis.push(MeasurementFn::mean_test_loss("mean_test", test));
        }
        Ok(Experiment { plan, phis })
    }

    pub fn phi(&self, id: &str) -> anyhow::Result<&MeasurementFn> {
        self.phis
            .iter()
            .find(|p| p.id == id)
            .with_context(|| format!("no measurement named `{id}`"))
            .map_err(|e| config_err(e.to_string()))
    }
}
