//! Message-passing networks trained with a minimal reverse-mode tape.
//!
//! A [`Model`] is a flat list of named parameter tensors split into three
//! groups: the message-passing backbone, the task head (class logits) and
//! the perception head (a scalar in `(0, 1)`). Every forward pass builds a
//! fresh [`Tape`] for one graph, so per-graph gradients can be computed on
//! independent threads and summed afterwards.

mod model;
mod optim;
pub mod tape;

pub use model::{
    default_node_features, gcn_propagation, gin_propagation, spectral_normalize, Gradients, GraphObjective, Hyper,
    LayerKind, Model, Param, ParamGroup, ParamSelector, Tensor, DEFAULT_FEATURE_DIM,
};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced")]
    NonFinite,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("gradients have not been populated")]
    GradsAbsent,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
