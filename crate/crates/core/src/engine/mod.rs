//! Deterministic reference engine: forward, reverse-mode gradients and SGD
//! for every [`LayerKind`](crate::graph::LayerKind).
//!
//! The engine favours plain, auditable loops over speed. It backs the
//! parameter-count oracle for the cost model, finite-difference gradient
//! checks, connectivity analysis and the toy training runs.

mod exec;
mod gemm_conv;
mod gradcheck;
pub mod ops;
pub mod rng;
mod tensor;
mod train;
pub mod weights;

use thiserror::Error;

use crate::graph::GraphError;

pub use exec::{backward, backward_with_node_grads, forward, init_params, Activations, Mode, NodeGrads};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, GRAD_CHECK_MAX_PARAMS};
pub use tensor::{is_trainable, DType, Element, Param, ParamStore, Tensor, BIAS, BN_BETA, BN_GAMMA, BN_MEAN, BN_VAR, WEIGHT};
pub use train::{accuracy, softmax_cross_entropy, train_loop, train_step, window_means, TrainState, BN_MOMENTUM};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node}: missing parameter {field}")]
    MissingParam { node: String, field: &'static str },
    #[error("node {node}: parameter {field} has {got} elements, expected {expected}")]
    ParamShape { node: String, field: &'static str, expected: usize, got: usize },
    #[error("node {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("no activation recorded for node {0}; run forward first")]
    MissingActivation(String),
    #[error("node {0}: non-finite values")]
    NonFinite(String),
    #[error("label {label} at position {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("graph has {params} parameters; finite-difference checks are limited to {limit}")]
    TooManyParams { params: usize, limit: usize },
    #[error("training needs a graph ending in Linear over GlobalAvgPool: {0}")]
    NotAClassifier(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
