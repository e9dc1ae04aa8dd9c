//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use jdl_core::sampling::{Direction, GuidanceConfig};

use crate::commands::{self, parse_direction};
use crate::data::parse_class;
use crate::error::{CliError, CliResult};
use crate::run::{thread_cap, Run};

#[derive(Debug, Parser)]
#[command(name = "jdl", version, about = "Joint diffusion + classifier experiments from JSON configs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON, "schema": 1).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Parent directory for the run, overriding `output_root`.
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset (manifest + PGMs).
    GenData(Common),
    /// Train the latent autoencoder (latent.enabled only).
    TrainAe(Common),
    /// Train the evaluation oracle on fully labeled training data.
    TrainOracle(Common),
    /// Train the joint model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint inside the run's model directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class test AUC, one row per checkpoint.
    EvalAuc {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to score (default: model/final.bin).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Counterfactual explanations for one class and direction.
    Vce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `away` (removal) or `toward` (enforcing).
        #[arg(long)]
        direction: String,
        /// Class name or index.
        #[arg(long)]
        class: String,
    },
    /// Draw samples, optionally guided, over a sweep of scales.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples per scale (default: sampling.n).
        #[arg(long)]
        n: Option<usize>,
        /// Target class name or index (default: sampling.guidance).
        #[arg(long)]
        class: Option<String>,
        /// `toward`, `away` or `none`.
        #[arg(long)]
        direction: Option<String>,
        /// Comma-separated guidance scales (default: sampling.guidance.scale).
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
    },
    /// Aggregate all outputs of a run into one Markdown summary.
    Report(Common),
}

fn open(c: &Common) -> CliResult<Run> {
    Run::open(&c.config, c.root.as_deref())
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    thread_cap()?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&open(&c)?).map(drop),
        Command::TrainAe(c) => commands::train_ae(&open(&c)?).map(drop),
        Command::TrainOracle(c) => commands::train_oracle(&open(&c)?).map(drop),
        Command::Train { common, resume } => commands::train(&open(&common)?, resume.as_deref()).map(drop),
        Command::EvalAuc { common, checkpoints } => commands::eval_auc(&open(&common)?, &checkpoints).map(drop),
        Command::Vce { common, checkpoint, direction, class } => {
            let (d, k) = (parse_direction(&direction)?, parse_class(&class)?);
            commands::vce(&open(&common)?, checkpoint.as_deref(), d, k).map(drop)
        }
        Command::Sample { common, checkpoint, n, class, direction, scales } => {
            let run = open(&common)?;
            let base = run.cfg.sampling.guidance;
            let target_class = class.as_deref().map(parse_class).transpose()?.unwrap_or(base.target_class);
            let direction = direction.as_deref().map(parse_direction).transpose()?.unwrap_or(base.direction);
            if direction == Direction::None && !scales.is_empty() && scales.iter().any(|s| *s != 0.0) {
                return Err(CliError::Config("guidance scales need a direction".into()));
            }
            let scales = if scales.is_empty() { vec![base.scale] } else { scales };
            let g = GuidanceConfig { target_class, direction, scale: scales[0] };
            commands::sample(&run, checkpoint.as_deref(), n.unwrap_or(run.cfg.sampling.n), g, &scales).map(drop)
        }
        Command::Report(c) => commands::report(&open(&c)?).map(drop),
    }
}
