use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factornet::runner::{self, ExperimentConfig, Task};
use factornet::Error;

/// Factor-augmented neural network experiments.
#[derive(Parser)]
#[command(name = "factornet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one simulated dataset and write it as CSV.
    Simulate(RunArgs),
    /// Tune, then train every model on fresh simulated datasets.
    Benchmark(RunArgs),
    /// Benchmark across several input dimensions.
    Sweep(RunArgs),
    /// Random hyperparameter search only.
    Tune(RunArgs),
    /// Walk-forward trading backtest on a price panel.
    Backtest(RunArgs),
    /// Out-of-sample R² on a macroeconomic panel.
    Macro(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

const EXIT_FATAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::Simulate(a) => (Task::Simulate, a),
        Command::Benchmark(a) => (Task::Benchmark, a),
        Command::Sweep(a) => (Task::Sweep, a),
        Command::Tune(a) => (Task::Tune, a),
        Command::Backtest(a) => (Task::Backtest, a),
        Command::Macro(a) => (Task::Macro, a),
    };
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match runner::run(task, &cfg, &args.out, args.jobs) {
        Ok(report) if report.n_failed > 0 => {
            eprintln!(
                "{} of {} runs failed; partial results in {}",
                report.n_failed,
                report.n_rows,
                args.out.display()
            );
            ExitCode::from(EXIT_PARTIAL)
        }
        Ok(report) => {
            println!("wrote {} files to {}", report.files.len(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e @ (Error::Config(_) | Error::Contract(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
