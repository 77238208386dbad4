//! `bcl`: one entry point for the sequential-inference experiments.
//!
//! `bcl run <experiment>` executes a plan and writes CSV/JSON artifacts;
//! `bcl validate` resolves a config without running and echoes every
//! default the run would use. Exit codes: 0 success, 2 bad config or
//! arguments, 3 failure during a run.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{resolve, CliError, CliOverrides, Config, ExperimentKind, ScenarioKind, SeedsSpec};

#[derive(Parser)]
#[command(
    name = "bcl",
    version,
    about = "Sequential Bayesian continual-learning experiments",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment end to end and write artifacts.
    Run(RunArgs),
    /// Resolve a config without running: echo the full plan (every
    /// default included) and warn about unknown keys.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment to run; overrides the config file's "experiment".
    #[arg(value_enum)]
    experiment: Option<ExperimentKind>,

    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed count ("10" means seeds 0..10) or comma-separated list ("3,7,11").
    #[arg(long)]
    seeds: Option<String>,

    /// Output directory (default runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads for the seed fan-out (default: one per core).
    #[arg(long)]
    threads: Option<usize>,

    /// Changepoint preset for the filter experiment.
    #[arg(long, value_enum)]
    scenario: Option<ScenarioKind>,

    /// Dataset: toy, toy-gaussians, toy-strip-bands, split, split-mnist, split-fmnist.
    #[arg(long)]
    dataset: Option<String>,

    /// Directory holding the four IDX files (train/t10k images and labels).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
}

impl CommonArgs {
    fn overrides(&self) -> Result<CliOverrides, CliError> {
        Ok(CliOverrides {
            experiment: self.experiment,
            seeds: self.seeds.as_deref().map(SeedsSpec::parse_flag).transpose()?,
            out: self.out.clone(),
            threads: self.threads,
            scenario: self.scenario,
            dataset: self.dataset.clone(),
            data_dir: self.data_dir.clone(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run(args) => cmd_run(&args.common),
        Cmd::Validate(args) => cmd_validate(&args.common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn load_and_resolve(common: &CommonArgs) -> Result<(config::Resolved, Vec<String>), CliError> {
    let (cfg, warnings) = Config::load(common.config.as_deref())?;
    let resolved = resolve(cfg, &common.overrides()?)?;
    Ok((resolved, warnings))
}

fn cmd_run(common: &CommonArgs) -> Result<(), CliError> {
    let (resolved, warnings) = load_and_resolve(common)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "running {} on {} seed(s) -> {}",
        resolved.experiment,
        resolved.seeds.len(),
        resolved.out.display()
    );
    experiments::run(&resolved)?;
    eprintln!("done: {}", resolved.out.join("aggregate.json").display());
    Ok(())
}

fn cmd_validate(common: &CommonArgs) -> Result<(), CliError> {
    let (resolved, warnings) = load_and_resolve(common)?;
    for w in &warnings {
        println!("warning: {w}");
    }
    println!("{}", resolved.to_json_pretty());
    Ok(())
}
