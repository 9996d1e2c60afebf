//! Command-line front end: generate streams, build geocells, run experiments
//! (including ablation matrices), evaluate transfer, and merge runs into
//! plot-ready tables.
//!
//! Exit status: 0 on success, 2 on configuration errors (bad or missing
//! config keys/files), 1 on runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oclbench_core::OclError;

#[derive(Parser)]
#[command(name = "oclbench", version, about = "Online continual learning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a stream spec into stream + validation files.
    GenStream(GenStreamArgs),
    /// Partition geotagged points into count-bounded classification cells.
    BuildCells(BuildCellsArgs),
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Evaluate backward/forward transfer of a saved checkpoint.
    EvalTransfer(EvalTransferArgs),
    /// Merge completed runs into comparison tables.
    Compare(CompareArgs),
    /// Run one experiment per value of a config axis, then compare.
    Ablation(AblationArgs),
}

#[derive(Args)]
pub struct GenStreamArgs {
    /// Stream spec file (flat key = value).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for stream.txt and validation.txt.
    #[arg(long)]
    out: PathBuf,
    /// Validation fraction sampled over the whole range.
    #[arg(long, default_value_t = 0.01)]
    holdout: f64,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct BuildCellsArgs {
    /// CSV of lat,lon rows (exclusive with --random).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Generate this many uniform points instead of reading a file.
    #[arg(long)]
    random: Option<usize>,
    /// Region for --random as min_lat:max_lat:min_lon:max_lon.
    #[arg(long, default_value = "-60:70:-180:180")]
    region: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-cell count bounds.
    #[arg(long, default_value_t = 50)]
    min_count: usize,
    #[arg(long, default_value_t = 10_000)]
    max_count: usize,
    #[arg(long, default_value_t = 16)]
    max_depth: u32,
    /// Output directory for cells.txt and distance_cdf.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct RunArgs {
    /// Experiment config file (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the blind temporal-coherence baseline instead of a learner.
    #[arg(long, default_value_t = false)]
    blind: bool,
}

#[derive(Args)]
pub struct EvalTransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Validation file written by gen-stream.
    #[arg(long)]
    validation: PathBuf,
    /// Stream time T of the checkpoint.
    #[arg(long)]
    at: u64,
    /// Stream horizon H; defaults to the validation header's steps.
    #[arg(long)]
    horizon: Option<u64>,
    /// Comma-separated window sizes; defaults to log-spaced.
    #[arg(long)]
    windows: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Output directory for the merged tables.
    #[arg(long)]
    out: PathBuf,
    /// Two or more completed run directories.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
pub struct AblationArgs {
    #[arg(long)]
    config: PathBuf,
    /// Axis spec: schedule=constant,cosine,polrs | R=...,... | B=...,...
    #[arg(long)]
    axis: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenStream(args) => commands::gen_stream(args),
        Command::BuildCells(args) => commands::build_cells(args),
        Command::Run(args) => commands::run(args),
        Command::EvalTransfer(args) => commands::eval_transfer(args),
        Command::Compare(args) => commands::compare(args),
        Command::Ablation(args) => commands::ablation(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                OclError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
