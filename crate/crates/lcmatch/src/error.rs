use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the pipeline stages so callers can match on what actually went wrong.
#[derive(Error, Debug)]
pub enum Error {
    #[error("duplicate token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("vocabulary stream is empty")]
    EmptyVocabulary,

    #[error("empty token at line {line}")]
    EmptyToken { line: usize },

    #[error("invalid context length {context_len}: must be at least 3")]
    InvalidContext { context_len: usize },

    #[error("invalid stride {stride}: must be in 1..={content_capacity}")]
    InvalidStride { stride: usize, content_capacity: usize },

    #[error("invalid pooling kernel {kernel}: {reason}")]
    InvalidKernel { kernel: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("training diverged: loss is not finite")]
    TrainingDiverged,

    #[error("invalid k {k}: must be in 1..={n}")]
    InvalidK { k: usize, n: usize },

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("invalid configuration field {field}: {message}")]
    Config { field: String, message: String },

    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: msg.into() }
    }

    /// True for errors caused by bad invocation or configuration rather than
    /// by a failure while doing the work. The CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidContext { .. }
                | Error::InvalidStride { .. }
                | Error::InvalidKernel { .. }
                | Error::InvalidK { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
