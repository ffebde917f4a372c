use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::transition::Action;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("action {action} at index {index} is not valid in state {state}")]
    InvalidAction {
        action: Action,
        index: usize,
        state: String,
    },

    #[error("action sequence is incomplete after {len} actions: {state}")]
    Incomplete { len: usize, state: String },

    #[error("tree is not projective: arc {a:?} crosses arc {b:?}")]
    NonProjective { a: (usize, usize), b: (usize, usize) },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus contains no usable sentences")]
    EmptyCorpus,

    #[error("no embedding for sentence `{id}` at layer {layer}")]
    MissingEmbedding { id: String, layer: usize },

    #[error("no embeddings at layer {layer} for sentences {ids:?}")]
    MissingEmbeddings { ids: Vec<String>, layer: usize },

    #[error("layer {layer} is not available (provider offers {available:?})")]
    UnknownLayer { layer: usize, available: Vec<usize> },

    #[error("provider does not support {0}")]
    Unsupported(&'static str),

    #[error("service error: {0}")]
    Service(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("action at index {index} has zero probability")]
    ZeroProbability { index: usize },

    #[error("target is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("decoding failed: {0}")]
    DecodeFailure(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
