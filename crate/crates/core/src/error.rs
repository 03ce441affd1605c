use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no flux data on trajectory")]
    NoFluxData,

    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },

    #[error("Newton iteration limit reached after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    IterationLimit {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
