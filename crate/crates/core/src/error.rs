use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward root must be a scalar, found shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("conjugate gradient stopped after {iterations} iterations with relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("collective: {0}")]
    Collective(String),

    #[error("replica divergence: {0}")]
    ReplicaDivergence(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: usize,
        found: usize,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }
}
