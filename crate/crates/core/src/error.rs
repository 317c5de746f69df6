use std::fmt;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training invariant violated: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub(crate) fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    pub(crate) fn state(msg: impl fmt::Display) -> Self {
        Error::State(msg.to_string())
    }

    pub(crate) fn capacity(msg: impl fmt::Display) -> Self {
        Error::Capacity(msg.to_string())
    }

    pub(crate) fn data(msg: impl fmt::Display) -> Self {
        Error::Data(msg.to_string())
    }

    pub(crate) fn invariant(msg: impl fmt::Display) -> Self {
        Error::Invariant(msg.to_string())
    }
}
