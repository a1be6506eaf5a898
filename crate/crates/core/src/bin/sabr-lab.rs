//! Experiment runner.
//!
//! ```text
//! sabr-lab <experiment> [--config FILE] [--seed N] [--out DIR] [--samples M] [--threads T]
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure or more
//! than 1% of paths excluded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use perturbed_sde::cli::{parse_config, run_experiment, ExperimentConfig, ExperimentKind};
use perturbed_sde::error::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Experiment {
    PathDemo,
    StrongError,
    NuSweep,
    BetaSweep,
    MlmcDiagnostics,
    MlmcPrice,
}

impl From<Experiment> for ExperimentKind {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::PathDemo => ExperimentKind::PathDemo,
            Experiment::StrongError => ExperimentKind::StrongError,
            Experiment::NuSweep => ExperimentKind::NuSweep,
            Experiment::BetaSweep => ExperimentKind::BetaSweep,
            Experiment::MlmcDiagnostics => ExperimentKind::MlmcDiagnostics,
            Experiment::MlmcPrice => ExperimentKind::MlmcPrice,
        }
    }
}

#[derive(Debug, Parser)]
#[command(version, about = "Accelerated scheme and MLMC experiments for SABR")]
struct Args {
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML configuration; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: `output` from the config, else `out`].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn load(args: &Args) -> Result<ExperimentConfig, Error> {
    let raw = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?,
        None => String::new(),
    };
    let mut config = parse_config(&raw, Some(args.experiment.into()))?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    if let Some(samples) = args.samples {
        config = config.with_samples(samples)?;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("cannot start {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    match run_experiment(&config, &out) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            if summary.excluded_paths > 0 {
                eprintln!(
                    "excluded {} of {} paths after non-finite states",
                    summary.excluded_paths, summary.configured_paths
                );
            }
            if summary.exceeds_exclusion_threshold() {
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
