//! Batch front-end: `simulate`, `regret-sweep`, `verify` and `constants` over a JSON
//! experiment configuration.
//!
//! Exit codes: 0 success, 1 runtime or solver failure (or violations found by `verify`),
//! 2 rejected configuration or unmet precondition.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub use config::{ControllerSpec, ExperimentConfig, TerminalSpec, VerificationSpec};

/// Environment variable capping the number of worker threads.
pub const THREADS_VAR: &str = "LTV_PC_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "ltv-pc",
    version,
    about = "Predictive control for LTV systems and its verification lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the declared controllers and write trajectories plus a cost summary.
    Simulate {
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Sweep the prediction window of PC_k and fit the regret decay.
    RegretSweep {
        config: PathBuf,
        #[arg(long)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run one verification suite; exits 0 iff it finds no violations.
    Verify {
        config: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the theory constants and window thresholds of the configured instance.
    Constants {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Error::Configuration(format!(
            "{THREADS_VAR} must be a positive integer (got `{raw}`)"
        ))
    })?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { config, output_dir } => {
            commands::simulate(&config, output_dir.as_deref())
        }
        Command::RegretSweep {
            config,
            k_min,
            k_max,
            output_dir,
        } => commands::regret(&config, k_min, k_max, output_dir.as_deref()),
        Command::Verify {
            config,
            suite,
            output_dir,
        } => commands::verify(&config, &suite, output_dir.as_deref()),
        Command::Constants { config, output_dir } => {
            commands::constants(&config, output_dir.as_deref())
        }
    }
}

/// Maps an outcome to the process exit code.
pub fn exit_code(outcome: &Result<bool>) -> i32 {
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) if e.is_rejection() => 2,
        Err(_) => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = dispatch(cli);
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    exit_code(&outcome)
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
