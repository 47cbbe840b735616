//! Define-by-run reverse-mode differentiation over dense `f64` tensors,
//! with the AdamW optimizer, learning-rate schedules and checkpoints.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar consumes the graph and returns the
//! gradients of every parameter that the scalar depends on.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamW, Decay, ParamId, Parameter, ParameterStore, Schedule};
pub use tensor::Tensor;
pub(crate) use optim::normal_tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss does not depend on any trainable value")]
    DisconnectedGraph,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
