//! `sehm`: data generation, training, evaluation, explanation, timing and
//! ablation runs, plus an invariant self-check.

mod commands;
mod config;
mod error;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sehm_core::model::Architecture;
use sehm_core::recurrent::CellKind;
use sehm_core::train::ExplainerMode;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sehm", version, about = "Self-explaining hierarchical model for long time series with gaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "sehm-out")]
    out: PathBuf,
    /// JSONL dataset (otherwise the configured synthetic task is generated).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model initialization and batch-order seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Synthetic data seed.
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    /// Train/validation/test split seed.
    #[arg(long, global = true)]
    split_seed: Option<u64>,
    /// Concurrent training runs for `ablate`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Training epochs (also per run in `ablate`).
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as JSONL.
    GenerateData {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model and write its checkpoint and history.
    Train {
        #[arg(long, value_parser = ["gru", "lstm"])]
        cell: Option<String>,
        #[arg(long, value_parser = ["sehm", "recurrent"])]
        architecture: Option<String>,
        #[arg(long)]
        neighbor: Option<usize>,
        #[arg(long, value_parser = ["joint", "separate", "off"])]
        explainer_mode: Option<String>,
    },
    /// Predictive and interpretability metrics of a checkpoint on the test split.
    Evaluate {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-sample contribution tables.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset rows, comma separated.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<usize>,
    },
    /// Epoch wall-clock per neighbor size.
    Benchmark {
        #[arg(long, value_delimiter = ',')]
        neighbors: Vec<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// The eight-row locality / zero-encoding / kernelization grid.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Gradient checks, gap exactness, surrogate bound and certificate bound.
    Selfcheck,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if c.data.is_some() {
        cfg.data = c.data.clone();
    }
    if let Some(s) = c.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = c.data_seed {
        cfg.synthetic.seed = s;
    }
    if let Some(s) = c.split_seed {
        cfg.train.split_seed = s;
    }
    if let Some(w) = c.workers {
        cfg.ablation.workers = w;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    match &cli.command {
        Command::GenerateData { samples } => {
            if let Some(n) = samples {
                cfg.synthetic.samples = *n;
            }
        }
        Command::Train {
            cell,
            architecture,
            neighbor,
            explainer_mode,
        } => {
            if let Some(cell) = cell {
                cfg.model.cell = if cell == "lstm" { CellKind::Lstm } else { CellKind::Gru };
            }
            if let Some(a) = architecture {
                cfg.model.architecture = if a == "recurrent" { Architecture::Recurrent } else { Architecture::Sehm };
            }
            if let Some(n) = neighbor {
                cfg.model.neighbor = *n;
            }
            if let Some(m) = explainer_mode {
                cfg.train.explainer_mode = match m.as_str() {
                    "joint" => ExplainerMode::Joint,
                    "separate" => ExplainerMode::Separate,
                    _ => ExplainerMode::Off,
                };
            }
        }
        Command::Explain { samples, .. } if !samples.is_empty() => cfg.explain.samples = samples.clone(),
        Command::Benchmark { neighbors, repetitions } => {
            if !neighbors.is_empty() {
                cfg.benchmark.neighbors = neighbors.clone();
            }
            if let Some(r) = repetitions {
                cfg.benchmark.repetitions = *r;
            }
        }
        Command::Ablate { seeds } if !seeds.is_empty() => cfg.ablation.seeds = seeds.clone(),
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let out = cli.common.out.clone();
    std::fs::create_dir_all(&out).map_err(error::io_err(&out))?;
    let default_ckpt = || out.join(commands::CHECKPOINT_FILE);
    match cli.command {
        Command::GenerateData { .. } => commands::generate_data(&cfg, &out),
        Command::Train { .. } => commands::train(&cfg, &out),
        Command::Evaluate { checkpoint } => commands::evaluate(&cfg, &out, &checkpoint.unwrap_or_else(default_ckpt)),
        Command::Explain { checkpoint, .. } => commands::explain(&cfg, &out, &checkpoint.unwrap_or_else(default_ckpt)),
        Command::Benchmark { .. } => commands::benchmark(&cfg, &out),
        Command::Ablate { .. } => commands::ablate(&cfg, &out),
        Command::Selfcheck => selfcheck::run(&cfg, &out),
    }
}

/// Collapses a possibly multi-line message onto one line.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Check(_) => e.to_string(),
                _ => format!("error: {e}"),
            };
            eprintln!("{}", one_line(&msg));
            ExitCode::FAILURE
        }
    }
}
