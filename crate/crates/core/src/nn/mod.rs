//! Small deterministic neural-network engine in f64.
//!
//! Networks are sequential stacks of dense, 1-D convolution, max-pooling and
//! peephole LSTM layers. Samples are processed one at a time; batch
//! gradients are accumulated in sample order so that training is
//! bit-reproducible for a given seed.

mod container;
mod gradcheck;
mod layer;
mod lstm;
mod network;
mod tensor;
mod train;

pub use container::{read_model, read_model_file, write_model, write_model_file, Extras, MODEL_MAGIC, MODEL_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layer::{conv_output_len, pool_output_len, Activation, Layer, LayerSpec};
pub use lstm::{lstm_step, LstmStep, LstmWeights};
pub use network::{mse, Gradients, Network};
pub use tensor::Tensor;
pub use train::{sgd_step, train, TrainConfig, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("({len} - {extent} + 2*{padding}) is not divisible by stride {stride}")]
    IndivisibleStride { len: usize, extent: usize, padding: usize, stride: usize },
    #[error("invalid layer: {0}")]
    InvalidSpec(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
