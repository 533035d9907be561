//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("layer {layer} out of range (depth {depth})")]
    LayerOutOfRange { layer: usize, depth: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("unknown personalization method: {0}")]
    UnknownMethod(String),

    #[error("unresolved user id: {0}")]
    UnknownUser(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
