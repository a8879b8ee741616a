//! Scalar-output multilayer perceptrons, the Adam optimizer and the
//! parameter checkpoint format.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{Adam, AdamConfig, Direction};
pub use checkpoint::{read_params, write_params, CHECKPOINT_MAGIC};
pub use mlp::{Activation, BoundMlp, MlpParams, MlpSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {0} has zero width")]
    ZeroWidth(usize),
    #[error("network needs at least one hidden layer")]
    NoHiddenLayers,
    #[error("input has {got} features, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, spec needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite gradient entry {index} at optimizer step {step}")]
    NonFiniteGradient { step: u64, index: usize },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}
