mod commands;
mod descriptor;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "kptransfer", version, about = "Keypoint-subset transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    /// Head-normalised PCK.
    Pckh,
    /// PCK normalised by the ground-truth bounding box.
    PckBbox,
    /// Training-time accuracy on heatmap cells.
    PckHeatmap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SubsetArg {
    S1,
    S2,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run described by a TOML file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output root; run directories and the stage-1 cache live here.
        #[arg(long, env = "KPTRANSFER_OUT", default_value = "runs")]
        out: PathBuf,
        /// Replace an existing run with the same id.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long, value_enum, default_value = "pckh")]
        metric: MetricArg,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "s2")]
        subset: SubsetArg,
        /// Report file; defaults to `<checkpoint>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table over the runs in a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Only runs on this split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        csv: bool,
    },
    /// Validation-accuracy curves of every run in a directory.
    Curves {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            resolution,
            out,
        } => {
            if count == 0 {
                let mut cmd = Cli::command();
                cmd.build();
                let usage = cmd
                    .find_subcommand_mut("gen-data")
                    .expect("subcommand exists")
                    .render_usage();
                return Err(CliError::Usage(format!("--count must be at least 1\n\n{usage}")));
            }
            commands::gen_data(seed, count, resolution, &out)
        }
        Command::Train { config, out, force } => commands::train(&config, &out, force),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            metric,
            threshold,
            subset,
            out,
        } => commands::eval(&checkpoint, &dataset, &split, metric, threshold, subset, out),
        Command::Report { runs, split, csv } => commands::report(&runs, split.as_deref(), csv),
        Command::Curves { runs } => commands::curves(&runs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
