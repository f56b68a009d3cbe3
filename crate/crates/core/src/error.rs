use alloc::boxed::Box;
use alloc::string::String;

use crate::adapters::StrategyKind;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {}x{}, right is {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: length mismatch, expected {expected}, got {actual}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("rank {rank} is not low-rank for a {m}x{n} weight (requires 1 <= rank < min(m, n))")]
    NotLowRank { rank: usize, m: usize, n: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("{what} index {index} out of range (size {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("strategy mismatch: adapter is {adapter}, payload requested for {requested}")]
    StrategyMismatch {
        adapter: StrategyKind,
        requested: StrategyKind,
    },

    #[error("client {client}: proximal term requires a downlink reference")]
    MissingReference { client: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("base model is sealed for federation; pretraining is no longer allowed")]
    BaseSealed,

    #[error("client {client} failed: {source}")]
    ClientFailed { client: usize, source: Box<Error> },

    #[error("malformed payload: {0}")]
    Payload(&'static str),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
