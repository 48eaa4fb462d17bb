use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DtrError>;

#[derive(Debug, Error)]
pub enum DtrError {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stage {stage} is out of range 1..={num_stages}")]
    StageOutOfRange { stage: usize, num_stages: usize },

    #[error("cannot split {n} units into {k} folds")]
    TooManyFolds { n: usize, k: usize },

    #[error("fold assignments differ between stages")]
    FoldMismatch,

    #[error("policy class has {count} candidates, above the enumeration limit of {limit}")]
    ClassTooLarge { count: u128, limit: u128 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing potential outcomes: {0}")]
    MissingPotentialOutcomes(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for DtrError {
    fn from(err: csv::Error) -> Self {
        DtrError::InvalidInput(err.to_string())
    }
}
