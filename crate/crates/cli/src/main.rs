//! Batch command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad file, bad
//! schema, bad flag combination), 3 for numerical faults mid-run.

mod common;
mod eval;
mod export;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caplearn::error::Error;
use caplearn::verify::run_verification;

#[derive(Parser)]
#[command(name = "caplearn", version, about = "Safe footstep-placement learning on a pendulum surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, trajectories, and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the pure planner) and report gait metrics.
    Eval(EvalArgs),
    /// Run the safe-set, solver, and invariance oracles and print a report.
    VerifySafety(VerifyArgs),
    /// Convert a run directory into tidy plot-ready CSV files.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Scenario TOML file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in scenario: draco_walking, atlas_walking, atlas_turning.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Output directory for this run.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the configured episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint to evaluate; omitted means the pure planner baseline.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Output directory; the summary also goes to stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Evaluation episodes per scenario.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Sample budget for the safe-set checks; other checks scale from it.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Optional directory for the JSON report.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory containing metrics.jsonl and trajectories.csv.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Destination for the tidy CSVs; defaults to RUN/export.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn init_thread_pool() -> Result<(), Error> {
    match std::env::var("CAPLEARN_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| Error::Config(format!("CAPLEARN_THREADS must be a positive integer, got `{raw}`")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
        }
        Err(_) => Ok(()),
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Train(args) => train::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::VerifySafety(args) => {
            let cfg = common::resolve_config(&args.source)?;
            let report = run_verification(&cfg, args.samples.max(1))?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(out) = &args.out {
                common::write_run_preamble(out, "verify-safety", &cfg)?;
                std::fs::write(out.join("verify_report.json"), &json)?;
            }
            Ok(())
        }
        Command::Export(args) => export::run(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = init_thread_pool().and_then(|()| dispatch(cli.command));
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(common::exit_code(&e))
        }
    }
}
