use clap::{Parser, Subcommand};
use robust_gnss_cli::commands::{self, DiagnosePaths, Method, SolvePaths};
use robust_gnss_cli::{CliError, EXIT_INPUT, EXIT_OK};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "robust-gnss", version, about = "Robust GNSS positioning pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario: observations.csv and truth.csv
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate positions from an observations file
    Solve {
        #[arg(long, value_parser = clap::builder::ValueParser::new(|s: &str| s.parse::<Method>()))]
        method: Method,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-factor weights (fgo-gm, fgo-cauchy, fgo-gnc)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Per-round theta and objective table (fgo-gnc)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Pseudorange residuals at the solution (graph methods)
        #[arg(long)]
        residuals: Option<PathBuf>,
        /// Write weights of every GNC round instead of the final one
        #[arg(long)]
        all_rounds: bool,
        /// Run configuration (key = value)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare a solution with truth
    Eval {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Solution to compute the improvement against
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Per-epoch ENU error table
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Histogram, mixture and trace tables from solve outputs
    Diagnose {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        residuals: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { config, obs, truth, seed } => commands::simulate(&config, &obs, &truth, seed),
        Command::Solve { method, obs, out, weights, trace, residuals, all_rounds, config } => commands::solve(
            method,
            &SolvePaths {
                obs: &obs,
                out: &out,
                weights: weights.as_deref(),
                trace: trace.as_deref(),
                residuals: residuals.as_deref(),
                config: config.as_deref(),
            },
            all_rounds,
        ),
        Command::Eval { solution, truth, baseline, report, table } => {
            commands::eval(&solution, &truth, baseline.as_deref(), &report, table.as_deref())
        }
        Command::Diagnose { weights, residuals, trace, out_dir, components, bins, seed } => commands::diagnose(
            &DiagnosePaths {
                weights: weights.as_deref(),
                residuals: residuals.as_deref(),
                trace: trace.as_deref(),
                out_dir: &out_dir,
            },
            components,
            bins,
            seed,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
