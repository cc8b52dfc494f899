use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("node {node} ({kind}): {message}")]
    NodeShape {
        node: usize,
        kind: &'static str,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown architecture `{name}`; known: {}", known.join(", "))]
    UnknownArch { name: String, known: Vec<String> },

    #[error("unsupported node kind `{kind}` in coupled path at node {node}")]
    UnsupportedCoupling { node: usize, kind: &'static str },

    #[error("illegal channel drop: {0}")]
    IllegalDrop(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("prune record does not match model: {0}")]
    RecordMismatch(String),

    #[error("capacity level {level} is not materialized (available {min}..={max})")]
    LevelUnavailable { level: usize, min: usize, max: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
