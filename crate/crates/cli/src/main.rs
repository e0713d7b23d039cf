//! `subnetcl` command-line driver.
//!
//! Log verbosity comes from `SUBNETCL_LOG` (`error`, `warn`, `info`, `debug`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subnetcl::{Preset, Scenario};

#[derive(Parser, Debug)]
#[command(name = "subnetcl", version, about = "Continual learning with per-task binary subnetworks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Settings file (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory: written by `train`, read by `eval`, `masks` and `infer-id`.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `task` or `domain`.
    #[arg(long, global = true)]
    pub scenario: Option<Scenario>,
    /// `desk` (small, fast) or `paper` (full-length schedule).
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the whole task sequence, resuming from a checkpoint in --out.
    Train,
    /// Re-evaluate a finished run.
    Eval,
    /// Inspect the stored task masks.
    Masks {
        #[command(subcommand)]
        action: MasksAction,
    },
    /// Infer task ids for every test sample from first-layer statistics.
    InferId {
        /// Use at most this many test samples per task.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the ablation ladder and print the table.
    Ablation {
        /// Comma-separated toggles, cumulative left to right.
        #[arg(long, value_delimiter = ',', default_value = "baseline,freeze-norm,infer-id,gradient-supplementation")]
        ladder: Vec<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum MasksAction {
    /// Per-layer ones counts and compression ratio.
    Stats,
    /// Write one task's masks as a single-task container.
    Extract {
        #[arg(long)]
        task: usize,
        #[arg(long)]
        to: PathBuf,
    },
    /// Roundtrip and invariant checks; exits nonzero on any violation.
    Verify,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SUBNETCL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train => commands::train(&cli.common),
        Command::Eval => commands::eval(&cli.common),
        Command::Masks { action } => commands::masks(&cli.common, action),
        Command::InferId { samples } => commands::infer_id(&cli.common, samples),
        Command::Ablation { ladder } => commands::ablation(&cli.common, &ladder),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<subnetcl::Error>().map_or(1, |e| e.code());
            ExitCode::from(code as u8)
        }
    }
}
