use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; the message names the offending dimension.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tensor was not produced on this tape")]
    NotOnTape,

    #[error("parameter `{name}` has no gradient; run backward first")]
    MissingGrad { name: String },

    #[error("homography is singular (|det| = {det:.3e})")]
    SingularHomography { det: f64 },

    #[error("reference entropy map has zero mean entropy")]
    ZeroEntropyReference,

    #[error("frame carries no depth buffers; degradation needs a rendered frame")]
    MissingDepth,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("data error: {msg}")]
    Data { msg: String },

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

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data { msg: msg.into() }
    }

    /// Process exit code for the CLI: 2 for config problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data { .. } | Error::Io(_) => 3,
            _ => 1,
        }
    }
}
