//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("schema error in {table}: {message}")]
    Schema { table: String, message: String },

    #[error("validation error in {table}: {message}")]
    Validation { table: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("age {age_months} months outside covered bands")]
    AgeOutOfRange { age_months: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type SimResult<T> = Result<T, SimError>;
