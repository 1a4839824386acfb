//! `owsol` command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! filesystem errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "owsol", version, about = "Open-world localization on synthetic toy images")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = all logical CPUs).
    #[arg(long, global = true, env = "OWSOL_WORKERS", default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// colearn, scl_only, scl_ocl or ce_baseline.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint: Clus, Loc and Clus-Loc accuracy per role.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        theta: Option<f32>,
        /// Also scan theta over 0.1..=0.9 and report the best threshold.
        #[arg(long)]
        sweep: bool,
        /// Defaults to `<checkpoint>/eval-<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-sample activation maps, heatmaps and boxes.
    GcamExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        theta: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the number of classes in the training data.
    EstimateK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k_min: usize,
        #[arg(long, default_value_t = 48)]
        k_max: usize,
        /// Defaults to `<checkpoint>/estimate-k`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Canned desk-scale experiments.
    Experiment {
        #[arg(value_enum)]
        kind: commands::Experiment,
        #[command(flatten)]
        common: Common,
        /// Dataset directory; without it a dataset is generated per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds; results are also reported as medians.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated sweep values for the sensitivity experiments.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        /// Fraction of novel classes held out by `zeroshot`.
        #[arg(long, default_value_t = 0.6)]
        held_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> owsol::Result<()> {
    match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, &out),
        Command::Train {
            common,
            data,
            out,
            mode,
        } => commands::train(&common, &data, &out, mode.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            theta,
            sweep,
            out,
        } => commands::eval(&common, &checkpoint, data.as_deref(), split, theta, sweep, out),
        Command::GcamExport {
            common,
            checkpoint,
            data,
            split,
            theta,
            out,
        } => commands::gcam_export(&common, &checkpoint, data.as_deref(), split, theta, &out),
        Command::EstimateK {
            common,
            checkpoint,
            data,
            k_min,
            k_max,
            out,
        } => commands::estimate_k(&common, &checkpoint, data.as_deref(), k_min, k_max, out),
        Command::Experiment {
            kind,
            common,
            data,
            seeds,
            grid,
            held_fraction,
            out,
        } => commands::experiment(kind, &common, data.as_deref(), &seeds, &grid, held_fraction, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers;
    match owsol::par::with_workers(workers, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("owsol: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
