//! `film` — experiment driver for the federated-training gradient-inversion
//! pipeline. Subcommands: `train`, `attack`, `sweep`, `metrics`. Exit codes:
//! 0 success, 2 configuration/validation error, 3 runtime numerical failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use film_core::Error;

#[derive(Parser)]
#[command(name = "film", about = "Federated LM training and gradient-inversion experiments")]
struct Cli {
    /// Experiment config file (flat `key = value` format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seeded component in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker hint for independent entries; execution is currently serial
    /// and produces identical output for any value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and record the eavesdropper transcript.
    Train,
    /// Attack a recorded transcript and score the recoveries.
    Attack,
    /// Re-run the attack varying one axis; emits sweep_<axis>.csv.
    Sweep {
        #[arg(long)]
        axis: String,
    },
    /// Re-score an existing results.jsonl without re-running the attack.
    Metrics,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| match &cli.command {
        Command::Train => run::cmd_train(&cfg),
        Command::Attack => run::cmd_attack(&cfg),
        Command::Sweep { axis } => run::cmd_sweep(&cfg, axis),
        Command::Metrics => run::cmd_metrics(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalFailure(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
