use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes do not satisfy an op's shape rule.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op attribute is outside its valid range.
    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The tape is in the wrong state for the requested call.
    #[error("tape state error: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }
}
