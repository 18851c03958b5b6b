use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so callers (notably the CLI) can
/// map them onto exit codes: configuration, data, training, transport.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Dimension {
        context: String,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("{what} out of range: {detail}")]
    Range { what: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity error: need {needed} records, only {available} available ({context})")]
    Capacity {
        context: String,
        needed: usize,
        available: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("protocol error in field {field}: {detail}")]
    Protocol { field: String, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(context: impl Into<String>, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            context: context.into(),
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
