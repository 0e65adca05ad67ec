use thiserror::Error;

#[derive(Debug, Error)]
pub enum FocalError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("softmax row {row} has no valid entries")]
    DegenerateRow { row: usize },

    #[error("index ({row}, {col}) outside {rows}x{cols} grid")]
    Index {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FocalError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FocalError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FocalError>;
