use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("need at least 2 logits, got {0}")]
    TooFewClasses(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("row {row}: expected {expected} fields, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: duplicate id {id}")]
    DuplicateId { row: usize, id: u64 },

    #[error("row {row}: label {label} outside [0, {num_classes}) and not -1")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    ParseField {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: non-finite value in column `{column}`")]
    NonFiniteField { row: usize, column: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown record id {0}")]
    UnknownId(u64),

    #[error("record {id} already labeled {existing}, refusing relabel to {requested}")]
    LabelConflict {
        id: u64,
        existing: usize,
        requested: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("record at position {0} has no label")]
    Unlabeled(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("oracle failed for record {id}: {reason}")]
    Oracle { id: u64, reason: String },

    #[error("no unlabeled records remain")]
    NoCandidates,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures caused by floating-point conditioning rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
