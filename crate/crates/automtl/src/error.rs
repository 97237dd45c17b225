//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("column slice {start}..{end} out of range for {cols} columns")]
    SliceOutOfRange { start: usize, end: usize, cols: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("vector norm below threshold, cosine similarity undefined")]
    ZeroVector,
    #[error("backward requires a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("loss tensor is not on this tape")]
    DetachedLoss,
    #[error("sequence must be nonempty")]
    EmptySequence,
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("at least one task loss is required")]
    NoLoss,
    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("missing target for task {0}")]
    MissingTarget(String),
    #[error("document too short: {len} tokens, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("character id {id} outside charset of size {size}")]
    CharOutOfCharset { id: usize, size: usize },
    #[error("no token eligible for masking")]
    NoEligibleToken,
    #[error("every language-model target is out of vocabulary")]
    AllOov,
    #[error("label {0} not present in the embedding store")]
    UnknownLabel(String),
    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),
    #[error("duplicate token {0} in embedding file")]
    DuplicateToken(String),
    #[error("split ratios invalid: {0}")]
    BadRatios(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split is empty")]
    EmptySplit,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caught while validating configuration or arguments,
    /// before any real work starts. Drives the CLI exit code (1 vs 2).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::BadRatios(_))
    }
}
