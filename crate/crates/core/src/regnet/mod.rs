//! Convolutional density regressors built from inception blocks, with
//! hand-written backpropagation, Adam training and a checksummed weight
//! format.

mod gradcheck;
mod io;
mod layers;
mod model;
mod tensor;
mod train;

pub use gradcheck::{grad_check, standard_cases, GradCase, GradCheckOptions, GradCheckReport, GradLoss};
pub use io::{load_weights, load_weights_expecting, save_weights, FORMAT_MAGIC};
pub use layers::{
    BatchNorm, Conv, Ctx, Dense, Dropout, Flatten, Inception, Layer, MaxPool, Net, Param, Relu, INCEPTION_KERNELS,
};
pub use model::{Arch, ArchConfig, RegModel, INPUT_MEAN, INPUT_SCALE};
pub use tensor::{Real, Tensor4};
pub use train::{adam_step, nmae, nmae_grad, train, train_logged, AdamState, Epoch, History, TrainConfig, TrainSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(String),
    #[error("label {0} is not positive")]
    NonPositiveLabel(f64),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    DivergedNaN { epoch: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("weight file checksum mismatch or truncated file")]
    ChecksumMismatch,
    #[error("weight file does not match the expected configuration: {0}")]
    ConfigMismatch(String),
    #[error("backward called without a training forward pass")]
    NoForwardCache,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RegError>;
