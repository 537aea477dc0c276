//! A small flow-matching video transformer with two motion branches: a
//! camera branch fed by point-cloud guidance and Plücker rays, and an object
//! branch fed by 3D trajectory tokens.
//!
//! The model is generic over the scalar type. Training runs in `f32`;
//! gradient checks run the same code in `f64`.

use std::path::PathBuf;

use mf_core::conditioning::ConditioningError;
use mf_core::tensor::{CheckpointError, TensorError};
use thiserror::Error;

pub mod config;
pub mod eval;
pub mod flow;
pub mod generate;
pub mod inputs;
pub mod latent;
mod layers;
pub mod model;
pub mod train;

pub use config::ModelConfig;
pub use flow::{euler_sample, OracleVelocity, VelocityField};
pub use inputs::CondInputs;
pub use generate::{generate, generate_from_spec, generate_with_progress, load_model};
pub use model::{Branches, DitModel};
pub use train::{train, RunConfig, Stage, TrainConfig};

#[derive(Debug, Error)]
pub enum DitError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("cancelled")]
    Cancelled,
    #[error("loss became non-finite at step {step} (stage {stage}): {detail}")]
    NonFinite { step: u64, stage: u8, detail: String },
}
