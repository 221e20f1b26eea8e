//! Command-line driver: synthetic data, layer probing, the three training
//! stages, cross-validation and evaluation.

pub mod commands;
pub mod config;
pub mod run;

use clap::{Parser, Subcommand};
use emofuse_core::{Error, Result};

pub use config::{Flags, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "emofuse", version, about = "Multimodal emotion recognition on pooled feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic feature store at --out.
    GenData,
    /// Per-layer linear probe under k-fold CV.
    ProbeLayers,
    /// Stage 1 on all labeled samples; writes <out>/adapter.ckpt.
    TrainAdapter,
    /// Stage 2 on the unlabeled split; writes <out>/vision.ckpt.
    AlignVision,
    /// Stage 3 on all labeled samples; writes <out>/fusion.ckpt.
    TrainFusion,
    /// Cross-validated run with checkpoints plus a final model.
    Pipeline,
    /// Cross-validation report only.
    Cv,
    /// Predictions for --split from the checkpoints in --out.
    Evaluate,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Numeric(_) | Error::Oracle(_) | Error::DegenerateEmbedding(_) => 4,
        _ => 3,
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::GenData => commands::gen_data(cfg),
        Command::ProbeLayers => commands::probe(cfg),
        Command::TrainAdapter => commands::train_adapter(cfg),
        Command::AlignVision => commands::align_vision(cfg),
        Command::TrainFusion => commands::train_fusion(cfg),
        Command::Pipeline => commands::pipeline(cfg),
        Command::Cv => commands::cv(cfg),
        Command::Evaluate => commands::evaluate(cfg),
    }
}

/// Applies EMOFUSE_THREADS to the global thread pool.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("EMOFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("EMOFUSE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
