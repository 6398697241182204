//! Training harness: synthetic regression tasks, a small adapted model,
//! optimizers, the training loop, and ablation sweeps.
//!
//! The task draws tokens from a handful of clusters, each with its own
//! linear target map, so a routed mixture has something real to specialize
//! on. The model stacks frozen random projections adapted by mixture
//! layers, with tanh between. Training combines the regression loss with
//! the auxiliary gate losses and reports every step.

mod ablation;
mod model;
mod optimizer;
mod task;
mod train;

pub use ablation::{run_ablation, write_ablation_csv, AblationRow, AblationSpec};
pub use model::{ModelForward, ModelVars, ToyModel};
pub use optimizer::{Optimizer, OptimizerKind};
pub use task::{Batch, SyntheticTask, TaskConfig};
pub use train::{
    evaluate, load_run, run_training, save_run, task_for, write_reports, EvalReport, StepReport,
    TrainConfig, TrainingRun,
};

use std::error::Error;
use std::fmt;

use crate::adapters::AdapterError;
use crate::checkpoint::CheckpointError;
use crate::losses::LossError;
use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq)]
pub enum HarnessError {
    /// A configuration value is unusable; the message names it.
    Config {
        message: String,
    },
    /// Training produced a NaN or infinite loss at the named step.
    NonFiniteLoss {
        step: usize,
    },
    Adapter(AdapterError),
    Loss(LossError),
    Numerics(NumericsError),
    Checkpoint(CheckpointError),
    Io {
        path: String,
        message: String,
    },
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config { message } => write!(f, "bad config: {message}"),
            HarnessError::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}; aborting")
            }
            HarnessError::Adapter(e) => write!(f, "{e}"),
            HarnessError::Loss(e) => write!(f, "{e}"),
            HarnessError::Numerics(e) => write!(f, "{e}"),
            HarnessError::Checkpoint(e) => write!(f, "{e}"),
            HarnessError::Io { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl Error for HarnessError {}

impl From<AdapterError> for HarnessError {
    fn from(e: AdapterError) -> Self {
        HarnessError::Adapter(e)
    }
}

impl From<LossError> for HarnessError {
    fn from(e: LossError) -> Self {
        HarnessError::Loss(e)
    }
}

impl From<NumericsError> for HarnessError {
    fn from(e: NumericsError) -> Self {
        HarnessError::Numerics(e)
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        HarnessError::Checkpoint(e)
    }
}
