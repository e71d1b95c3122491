use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid extent: {0}")]
    Extent(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("class {0} is absent from every volume")]
    ClassAbsent(u8),

    #[error("structure does not fit in the volume: {0}")]
    DoesNotFit(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("missing result cell: {0}")]
    MissingCell(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("bad volume file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
