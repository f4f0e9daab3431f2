//! `sdc-lab`: generate selective dependence datasets, train focus-classify
//! attention models, sweep variants and render reports and plots.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sdc_core::SdcError;

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "SDC_LAB_SEED";

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config files or inputs that do not fit together (exit 2).
    Usage(String),
    /// Anything that went wrong while working (exit 1).
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<SdcError> for Failure {
    fn from(e: SdcError) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sdc-lab", version, about = "Selective dependence classification experiments with focus-classify attention models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a dataset from a preset and write it in the interchange format.
    Generate(GenerateArgs),
    /// Train one variant with one seed and write its artifacts.
    Run(RunArgs),
    /// Train every (variant, seed) pair and write a report.
    Sweep(SweepArgs),
    /// Render SVG plots for a run or sweep directory.
    Plot(PlotArgs),
    /// Print the summary table of a report and check its mean rows.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset preset: synth-appdx-d, em1, em2, em3. With --dataset it only
    /// selects training defaults.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset file written by `generate`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Instances to sample (default depends on the preset).
    #[arg(long)]
    pub n: Option<usize>,
    /// Held-out fraction for sampled datasets.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Seed for datasets sampled on the fly.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Training epochs (default depends on the preset).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Entropy penalty weight (ER variants only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Minibatch size or `full`.
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Network family: mlp, linear, linear-mlp.
    #[arg(long)]
    pub arch: Option<String>,
    /// Epochs between dynamics records.
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file (keys: preset, n, seed, test_fraction, out).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Generation seed; falls back to SDC_LAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Output file (default <preset>-s<seed>.sdc).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Config file of `key = value` lines (see `sdc-lab --help`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Variant id such as SM-0 or HA-2.
    #[arg(long)]
    pub variant: Option<String>,
    /// Model seed; falls back to SDC_LAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Run directory (default runs/<variant>-s<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also evaluate a hard-attention model with the classified segment
    /// drawn from alpha; adds sampled_accuracy to run.txt.
    #[arg(long)]
    pub sample_hard: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    /// Config file of `key = value` lines (see `sdc-lab --help`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated variant ids (default: all ten benchmark variants).
    #[arg(long = "variant", alias = "variants")]
    pub variants: Option<String>,
    /// Seeds as a list or inclusive range, e.g. 0,1,2 or 0..4 (default 0..4).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Concurrent runs (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Sweep directory (default sweep).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    /// Run or sweep directory.
    pub dir: PathBuf,
    /// focus-heatmap, decision-boundary, dynamics or threshold (default:
    /// every kind that applies).
    #[arg(long)]
    pub plot_kind: Option<String>,
    /// Dataset for spatial plots (default: the one recorded by the run).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory for the SVG files (default <dir>/plots).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Sweep directory or report CSV.
    pub path: PathBuf,
    /// Also write the report with recomputed mean rows to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(config::help_text()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let outcome = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Run(a) => commands::run(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Report(a) => commands::report(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sdc-lab: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
