//! Error types shared across the crate.
//!
//! Every fallible operation returns [`SpadeError`]. The CLI maps error
//! categories onto process exit codes: 2 for configuration/parameter
//! problems, 3 for data/geometry problems, 4 for numerical failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpadeError>;

#[derive(Debug, Error)]
pub enum SpadeError {
    /// Invalid argument or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Tensor or embedding shape does not match what the operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// Singular transform, empty overlap, or other geometric impossibility.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Input has no usable signal (constant volume, zero-variance field).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A mapped patch landed entirely outside the destination volume.
    #[error("out of field: {0}")]
    OutOfField(String),

    /// Too few volumes (or other resources) to satisfy a request.
    #[error("availability error: {0}")]
    Availability(String),

    /// Rejection sampling gave up after too many consecutive failures.
    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),

    /// An entry violated a stated invariant (e.g. non-unit embedding).
    #[error("validation error: {0}")]
    Validation(String),

    /// A cohort could not be built (e.g. too few positives).
    #[error("cohort error: {0}")]
    Cohort(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value observed where finite math is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl SpadeError {
    /// CLI exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            SpadeError::Parameter(_) | SpadeError::Shape(_) => 2,
            SpadeError::Numerical(_) => 4,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for SpadeError {
    fn from(e: serde_json::Error) -> Self {
        SpadeError::Format(e.to_string())
    }
}
