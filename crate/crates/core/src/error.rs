use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid shape for field `{field}`: {detail}")]
    Shape { field: String, detail: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for `{field}`: {detail}")]
    InvalidValue { field: String, detail: String },

    #[error("attack set is unbounded")]
    UnboundedSet,

    #[error("attack set is empty (infeasible constraints)")]
    InfeasibleSet,

    #[error("conic program builder: {0}")]
    Builder(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("numerically degenerate solution: {0}")]
    Degenerate(String),

    #[error("conversion refused: {units} {sign} units would need 2^{units} = {size} affine pieces (cap is {cap})")]
    CapExceeded {
        sign: &'static str,
        units: usize,
        size: u128,
        cap: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("IDX format: {0}")]
    Idx(String),

    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("certification indeterminate: {0}")]
    Indeterminate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(field: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: &str, detail: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn json(err: serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
