use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("attention over an empty sequence")]
    EmptySequence,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite gradient in tensor `{name}`")]
    NonFiniteGrad { name: String },

    #[error("non-finite loss at step {step} (last finite loss: {last_finite:?})")]
    NonFiniteLoss {
        step: usize,
        last_finite: Option<f64>,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("config key `{key}`: {msg}")]
    ConfigKey { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the command-line tool: 3 for numerical
    /// failures, 2 for everything a user can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteGrad { .. } | Error::NonFiniteLoss { .. } | Error::Verification(_) => 3,
            _ => 2,
        }
    }
}
