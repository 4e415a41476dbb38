//! A small reverse-mode autodiff kernel and the CNN path loss regressor.
//!
//! Values are `f32`. Batch reductions (biases, pooling, loss) accumulate in
//! `f64`; the convolution and dense products go through `sgemm`.

mod adam;
mod checkpoint;
mod conv;
mod graph;
mod model;
mod tensor;

pub use adam::{adam_step, OptimState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_size};
pub use graph::{Gradients, Graph, Var};
pub use model::{stack_profiles, ConvBlockConfig, InitRecord, ModelConfig, ModelParams};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("backward already ran on this graph; record a new forward pass")]
    GraphConsumed,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}
