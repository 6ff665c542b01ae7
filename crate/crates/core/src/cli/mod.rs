//! Config-driven experiments: configuration, checkpoints and the commands
//! behind the `dscca` binary.

pub mod checkpoint;
pub mod config;
pub mod experiment;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainedModel};
pub use config::{Ablation, ExperimentConfig, ModelMode};
pub use experiment::{
    eval_command, output_root, retrieve_command, run_experiment, sweep, KSelectionReport, RunReport, SweepSummary,
    OUTPUT_DIR_ENV,
};

use crate::error::Error;

/// Process exit status for an error: 2 for numerical aborts, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort { .. } => 2,
        _ => 1,
    }
}
