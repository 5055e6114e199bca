use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfgp_cli::commands;

#[derive(Debug, Parser)]
#[command(name = "dfgp", version, about = "Spatio-temporal data fusion with a dynamic fused Gaussian process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Drop the fine-scale component (fixed-rank comparator).
    #[arg(long, global = true)]
    lowrank_only: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic two-instrument scenario.
    Simulate,
    /// Estimate parameters from all time steps.
    Fit,
    /// Filtered predictions, one fit per horizon unless parameters are given.
    Filter,
    /// Smoothed predictions from a single fit.
    Smooth,
    /// Hold out data, predict it and score the methods.
    Cv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let opts = commands::Overrides { out: cli.out, seed: cli.seed, lowrank_only: cli.lowrank_only };
    let run = match cli.command {
        Command::Simulate => commands::simulate(cli.config.as_deref(), &opts),
        Command::Fit => commands::fit(cli.config.as_deref(), &opts),
        Command::Filter => commands::filter(cli.config.as_deref(), &opts),
        Command::Smooth => commands::smooth(cli.config.as_deref(), &opts),
        Command::Cv => commands::cv(cli.config.as_deref(), &opts),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
