//! `tinybridge` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including I/O),
//! 3 numerical failure.

mod commands;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tinybridge::Error;

#[derive(Debug, Parser)]
#[command(name = "tinybridge", version, about = "Train and evaluate a language-vision bridge")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed override for the command's random stream.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write rendered scenes with captions and specs.
    Dataset {
        #[arg(long)]
        n: usize,
    },
    /// Train the bridge; `--seed` sets `train.seed`.
    Train {
        /// Continue from a checkpoint; its embedded config is authoritative.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps, writing a checkpoint there.
        #[arg(long, value_name = "STEP")]
        until: Option<u64>,
    },
    /// Generate one image per prompt line; `--seed` sets `sample.seed`.
    Sample {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        prompts: PathBuf,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Score a sample or dataset directory.
    Eval {
        #[arg(long, value_name = "DIR")]
        samples: PathBuf,
        /// Defaults to `report.txt` inside the samples directory.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Print parameter counts and the injection-site table.
    Params,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
