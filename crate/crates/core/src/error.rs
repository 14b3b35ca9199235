use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("constraints are infeasible")]
    Infeasible,

    #[error("problem is unbounded below")]
    Unbounded,

    #[error("transport problem {rows}x{cols} exceeds the exact-solver cap of {cap} per side; subsample first")]
    SizeExceeded { rows: usize, cols: usize, cap: usize },

    #[error("reference mass exhausted")]
    Exhausted,

    #[error("output unreachable from input: C A^i B vanishes for all i < {0}")]
    Unreachable(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("solver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("scenario field `{field}`: {msg}")]
    Scenario { field: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn scenario(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Scenario {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
