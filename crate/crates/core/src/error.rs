use thiserror::Error;

/// Errors produced by tensor math, parsing, configuration, and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: operation produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("grad: output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("grad: {0} is not reachable from the output node")]
    Unreachable(String),

    #[error("storyboard parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
