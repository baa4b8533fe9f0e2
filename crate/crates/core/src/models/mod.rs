//! Majorness predictors: a key-profile baseline over chroma and a small
//! convolutional regressor over mel-spectrograms.

mod checkpoint;
mod cnn;
mod keyprofile;

pub use checkpoint::{load_checkpoint, read_checkpoint_file, save_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cnn::{
    forward, grad_check, init_model, loss_and_gradient, prepare_input, train, ArchConfig, ModelParams, Optimizer, PreparedInput,
    TrainConfig, TrainOutcome, random_mel,
};
pub use keyprofile::{keyprofile_majorness, KeyProfileModel, KeyProfileScore, KRUMHANSL_KESSLER_MAJOR, KRUMHANSL_KESSLER_MINOR};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite training loss at epoch {epoch} (learning rate {learning_rate}, loss {loss})")]
    NonFinite { epoch: usize, learning_rate: f64, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
