//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data is malformed (non-finite entries, inconsistent shapes).
    #[error("invalid data: {0}")]
    Data(String),

    /// A class id required to be present has no samples.
    #[error("class {class} has no samples ({context})")]
    MissingClass { class: usize, context: String },

    /// A few-shot protocol cannot be applied to the given dataset.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A feature file failed to parse.
    #[error("load error at row {row}: {message}")]
    Load { row: usize, message: String },

    /// Data is too degenerate for the requested statistic.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A generated sample collapsed to the zero vector; the caller should resample.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// Gradient requested for a value the tape cannot differentiate.
    #[error("unsupported graph: {0}")]
    UnsupportedGraph(String),

    /// A loss term became non-finite.
    #[error("non-finite value in term '{term}': {value}")]
    NonFinite { term: String, value: f64 },

    /// A metric is undefined on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Experiment configuration is invalid; the offending field is named.
    #[error("config error in '{field}': {message}")]
    Config { field: String, message: String },

    /// Checkpoint or dataset file is structurally invalid.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: msg.into() }
    }
}
