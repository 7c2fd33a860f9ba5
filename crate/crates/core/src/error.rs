//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dataset handling, training, attacks, and defenses.
#[derive(Debug, Error)]
pub enum Error {
    /// CSV file could not be read or parsed at all.
    #[error("csv read failed: {0}")]
    CsvRead(#[from] csv::Error),

    /// CSV header does not match the declared schema.
    #[error("csv schema mismatch: {0}")]
    CsvSchema(String),

    /// A cell could not be interpreted under its declared column role.
    #[error("csv value error at row {row}, column {column}: {message}")]
    CsvValue {
        row: usize,
        column: String,
        message: String,
    },

    /// A label string was not in the declared class set.
    #[error("unknown label {label:?} at row {row}; declared classes: {classes:?}")]
    UnknownLabel {
        row: usize,
        label: String,
        classes: Vec<String>,
    },

    /// Generic shape/argument violation (empty input, dimension mismatch...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Split fractions do not sum to one or starve a part of points.
    #[error("invalid split: {0}")]
    InvalidSplit(String),

    /// Training loss became NaN or infinite (divergent learning rate).
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    DivergentTraining { epoch: usize, batch: usize },

    /// An annotation tag was required but absent from the data.
    #[error("annotation tag {0:?} does not occur in the dataset")]
    UnknownTag(String),

    /// A filter matched no points where at least one was required.
    #[error("empty subpopulation: {0}")]
    EmptySubpopulation(String),

    /// Operation is only defined for a different model architecture.
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    /// Conjugate gradient failed to converge within the iteration cap.
    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:.3e})")]
    CgDidNotConverge { iterations: usize, residual: f64 },

    /// Hessian solve requested without a positive-definite regularizer.
    #[error("hessian is not positive definite: {0}")]
    NonPositiveDefiniteHessian(String),

    /// Clamping was requested but no feature bounds were supplied.
    #[error("feature clamping requested but no bounds were supplied")]
    MissingBounds,

    /// Mixture specification is malformed.
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    /// JSON (de)serialization failure for a report or model artifact.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Filesystem failure while reading or writing an artifact.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
