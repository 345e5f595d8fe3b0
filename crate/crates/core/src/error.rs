use thiserror::Error;

/// Failures raised by tensor construction, tape operations and gradient checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("expected a scalar (0-dimensional) tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("internal tape invariant violated: {0}")]
    Internal(String),
}

impl TensorError {
    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(" vs ");
        TensorError::ShapeMismatch { op, shapes }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Domain {
            op,
            msg: msg.into(),
        }
    }
}

/// Failures in dataset construction, file IO and the higher-level pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("matching: {0}")]
    Matching(String),

    #[error("distillation failed at iteration {iteration}: {source}")]
    Distill {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("verification: {0}")]
    Verify(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
