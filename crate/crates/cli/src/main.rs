mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{ConfigError, LoadedConfig};

/// Exact data attribution experiments: train, attribute, score.
#[derive(Parser)]
#[command(name = "metagrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output root; overrides `out_dir` in the config.
    #[arg(short, long, global = true, env = "METAGRAD_OUT")]
    out: Option<PathBuf>,

    /// Override a config key, e.g. `--set training.epochs=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for independent retrainings (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train at all-ones weights and persist the checkpoint store.
    Train,
    /// Replay the stored run: one influence vector per measurement.
    Attribute,
    /// Linear datamodeling scores over the configured drop fractions.
    Lds,
    /// Compare replayed influence with central finite differences.
    Gradcheck,
    /// Retrain at `1 + eps e_i` over an eps grid.
    Probe,
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_BUDGET: u8 = 4;
const EXIT_UNDEFINED: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<metagrad::Error>() {
            return match e {
                metagrad::Error::Config(_) | metagrad::Error::Shape { .. } | metagrad::Error::Data(_) => EXIT_CONFIG,
                metagrad::Error::Divergence { .. }
                | metagrad::Error::NonFinite { .. }
                | metagrad::Error::NonFiniteAdjoint { .. } => EXIT_DIVERGENCE,
                metagrad::Error::Budget(_) => EXIT_BUDGET,
                metagrad::Error::UndefinedMetric(_) => EXIT_UNDEFINED,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("--threads {n}: {e}")))?;
    }
    let path = cli
        .config
        .ok_or_else(|| ConfigError("a config file is required (--config PATH)".into()))?;
    let loaded = LoadedConfig::load(&path, &cli.overrides)?;
    let out = cli
        .out
        .or_else(|| loaded.config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("metagrad-out"));
    let ctx = Ctx::new(loaded, &out)?;
    match cli.command {
        Command::Train => commands::train(&ctx),
        Command::Attribute => commands::attribute(&ctx),
        Command::Lds => commands::lds(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::Probe => commands::probe(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
