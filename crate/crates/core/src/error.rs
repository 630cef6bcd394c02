use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the sequence-labeling pipeline.
///
/// Each variant maps to one of the process exit codes used by the CLI:
/// usage errors (1), data errors (2) and numeric failures (3).
#[derive(Debug, Error)]
pub enum Error {
    /// A corpus line could not be parsed.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A label string is not part of the active label set.
    #[error("unknown label {label:?}{}", fmt_line(*.line))]
    UnknownLabel { label: String, line: Option<usize> },

    /// A corpus operation was given no sentences.
    #[error("corpus is empty")]
    EmptyCorpus,

    /// Invalid training or optimizer configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Tensor dimensions do not line up.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Brute-force oracle guard: the instance has too many tag sequences.
    #[error("instance too large for exhaustive enumeration: k^n = {paths} > {limit}")]
    InstanceTooLarge { paths: f64, limit: f64 },

    /// A saved model file is malformed or inconsistent.
    #[error("model file: {0}")]
    ModelFormat(String),

    /// The model's label set does not match the data it is applied to.
    #[error("label set mismatch: {0}")]
    LabelSetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_line(line: Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code for this error: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::NumericFailure(_) => 3,
            _ => 2,
        }
    }
}
