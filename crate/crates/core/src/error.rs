use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("svd of {rows}x{cols} matrix did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
        residual: f64,
    },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("missing stored activation for layer {layer}, position {position}: {what}")]
    MissingActivation {
        layer: usize,
        position: &'static str,
        what: &'static str,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
