//! `listcycle` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

mod commands;
mod draw;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "listcycle", version, about = "Cycle-consistent translation between images and object lists")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of PNG scenes, JSON ground truth and a manifest.
    Synth {
        /// Scene spec or run config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in scene spec: tetrominoes, mini-tetrominoes, sprites, sprites27.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Regenerate the dataset described by an existing manifest.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all four networks; writes checkpoints and a per-step loss CSV.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Dataset directory; overrides the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Final step count; overrides the config.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict object lists for images of any size.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection precision / recall / F1 against a synthesized dataset.
    Eval {
        #[arg(long, required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Score stored predictions (as written by `infer`) instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Matching radius in pixels; defaults to 0.05 · max(h, w).
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Davies–Bouldin index of matched features grouped by object type.
        #[arg(long)]
        dbi_out: Option<PathBuf>,
    },
    /// Render a grid sweeping two feature dimensions of one centred object.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a list, edit it and render the result.
    Manipulate {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        /// identity, translate:<factor>, swap, or rows:<json>.
        #[arg(long)]
        edit: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full cycle on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
