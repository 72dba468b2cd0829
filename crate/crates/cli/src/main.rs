//! Command-line front end: estimate targets, run resampling inference,
//! simulate panels, and measure band coverage, all over CSV/JSON files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{CommonArgs, RunPlan};
use fewtreat::Error;

#[derive(Parser)]
#[command(
    name = "fewtreat",
    version,
    about = "Difference-in-differences estimation and resampling inference \
             with few treated units"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Compute the point estimate for a panel.
    Estimate {
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Estimate and build a confidence band from resample draws.
    Infer {
        #[command(flatten)]
        args: CommonArgs,
        /// Also write the draws matrix as CSV (optionally to a given path).
        #[arg(long, num_args = 0..=1)]
        export_draws: Option<Option<PathBuf>>,
    },
    /// Simulate a panel from the configured data-generating process.
    Simulate {
        #[command(flatten)]
        args: CommonArgs,
    },
    /// Run a coverage experiment against a known truth.
    Coverage {
        #[command(flatten)]
        args: CommonArgs,
    },
}

fn init_thread_pool() {
    if let Ok(raw) = std::env::var("FEWTREAT_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                // A later failure means a pool already exists; keep going.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    init_thread_pool();
    match &cli.command {
        Command::Estimate { args } => {
            commands::run_estimate(&RunPlan::resolve("estimate", args, 10_000)?)
        }
        Command::Infer { args, export_draws } => {
            let plan = RunPlan::resolve("infer", args, 10_000)?;
            commands::run_infer(&plan, export_draws.as_ref())
        }
        Command::Simulate { args } => {
            commands::run_simulate(&RunPlan::resolve("simulate", args, 10_000)?)
        }
        Command::Coverage { args } => {
            commands::run_coverage(&RunPlan::resolve("coverage", args, 2_000)?)
        }
    }
}

fn main() -> ExitCode {
    // Map clap's own errors (unknown flags, bad values) to exit code 1;
    // help and version remain successes.
    if let Err(e) = Cli::try_parse() {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            _ => {
                eprint!("{e}");
                return ExitCode::from(1);
            }
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Internal(_)) => {
            eprintln!("fewtreat: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("fewtreat: {e}");
            ExitCode::from(1)
        }
    }
}
