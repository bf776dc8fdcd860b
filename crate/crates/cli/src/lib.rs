//! The `mimic` command line.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod setup;

use std::ffi::OsString;
use std::io::IsTerminal;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, StatsKindArg};
use crate::config::{default_config, parse_config, ExperimentConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mimic", about = "Model inversion experiments on frozen vision and vision-language models")]
pub struct Cli {
    /// Experiment configuration (JSON); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces the configured seeds with this one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for seeds and grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Log filter, e.g. info, debug or mimic_core=debug.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record reference statistics from real images or the verifier.
    CaptureStats {
        #[arg(long, value_enum, default_value = "encoder")]
        kind: StatsKindArg,
    },
    /// Optimize images for the configured target, one run per seed.
    Invert,
    /// Score a run directory, or text pairs alone.
    Eval {
        /// Run directory written by `invert` (a seed_N directory).
        run_dir: Option<PathBuf>,
        /// Tab-separated (candidate, reference) pairs.
        #[arg(long)]
        text_pairs: Option<PathBuf>,
        /// PNG directory of real images for FID and LPIPS.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Run the preset × concept × seed grid and write a leaderboard.
    Ablate {
        /// Stop after this many newly computed cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Charts and an image index for a grid directory.
    Report {
        grid_dir: PathBuf,
    },
    /// Greedy answers for the final images of a run.
    Decode {
        run_dir: PathBuf,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::CaptureStats { kind } => {
            let cfg = load_config(cli)?;
            commands::cmd_capture_stats(&cfg, &out_or(cli, "stats.json"), *kind)?;
        }
        Command::Invert => {
            let cfg = load_config(cli)?;
            commands::cmd_invert(&cfg, &out_or(cli, "runs"), cli.workers)?;
        }
        Command::Eval { run_dir, text_pairs, references } => {
            let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            commands::cmd_eval(&EvalArgs {
                run_dir: run_dir.as_deref(),
                text_pairs: text_pairs.as_deref(),
                references: references.as_deref(),
                out: cli.out.as_deref(),
                config: cfg.as_ref(),
            })?;
        }
        Command::Ablate { max_cells } => {
            let cfg = load_config(cli)?;
            let opts = ablate::AblateOptions { workers: cli.workers, max_cells: *max_cells };
            ablate::cmd_ablate(&cfg, &out_or(cli, "grid"), &opts)?;
        }
        Command::Report { grid_dir } => {
            let out = cli.out.clone().unwrap_or_else(|| grid_dir.join("report"));
            report::cmd_report(grid_dir, &out)?;
        }
        Command::Decode { run_dir } => {
            commands::cmd_decode(run_dir)?;
        }
    }
    Ok(())
}

fn init_logging(filter: &str) -> CliResult<()> {
    let filter = tracing_subscriber::EnvFilter::try_new(filter)
        .map_err(|e| CliError::Config(format!("--log-level: {e}")))?;
    // Already initialised when called repeatedly in one process.
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .try_init();
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = init_logging(&cli.log_level).and_then(|()| execute(&cli));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mimic: {e}");
            e.exit_code()
        }
    }
}

/// Convenience for tests: `run` on a list of string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("mimic").chain(args.iter().copied()))
}
