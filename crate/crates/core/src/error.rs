use thiserror::Error;

/// Errors raised by the numerical building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at coordinate {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {count} samples, need at least {needed}")]
    ClassTooSmall {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("k = {k} out of range for {available} candidate neighbours")]
    NeighborCountOutOfRange { k: usize, available: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("forward cache does not match the network: {0}")]
    StaleCache(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
