//! Experiment driver: training runs, subgoal ablations, evaluation,
//! checkpoints and learning curves.

use std::path::Path;

use mghl_core::agent::AgentError;
use mghl_core::envs::EnvError;
use mghl_core::trainer::TrainError;

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics_io;
pub mod run;
pub mod svg;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{Overrides, RunConfig};
pub use eval::{run_eval, EvalOptions, EvalReport};
pub use run::{run_ablation, run_train};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Eval(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}
