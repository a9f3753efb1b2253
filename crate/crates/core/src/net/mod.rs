//! Dense convolutional quality regressor and its training machinery.

mod checkpoint;
pub mod densenet;
mod grid;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod tensor;
mod train;

pub use densenet::{Arch, DenseNet, DenseNetSpec};
pub use layers::Mode;
pub use optim::{build_optimizer, Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use grid::{hyperparameter_grid, GridSelection};
pub use train::{build_model, train, train_with_progress, Checkpoint, TrainConfig, TrainSample};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {0} outside the 1-6 star scale")]
    InvalidLabel(f64),
    #[error("input preprocessed with {found} but the model expects {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid grid selection: {0}")]
    InvalidSelection(String),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}
