//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Non-uniform or unusable sampling in a loaded trajectory.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// Column layout of a data file does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Non-finite or otherwise invalid data entries.
    #[error("data error: {0}")]
    Data(String),
    /// Operation called on an object in the wrong state (e.g. unfitted pipeline).
    #[error("state error: {0}")]
    State(String),
    /// A lifted feature has (numerically) zero variance.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),
    /// Not enough past samples to evaluate a delay-lifted feature.
    #[error("history error: {0}")]
    History(String),
    /// Lifted vector cannot be mapped back to a state.
    #[error("retract error: {0}")]
    Retract(String),
    /// Incompatible matrix or system dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Resolvent is singular at the requested frequency.
    #[error("pole on unit circle: {0}")]
    PoleOnCircle(String),
    /// System norm requested for a system with spectral radius >= 1.
    #[error("unstable system: {0}")]
    UnstableSystem(String),
    /// Filter frequencies out of range.
    #[error("frequency error: {0}")]
    Frequency(String),
    /// Malformed semidefinite program.
    #[error("sdp build error: {0}")]
    Build(String),
    /// Bisection bracket invalid (upper endpoint infeasible).
    #[error("bracket error: {0}")]
    Bracket(String),
    /// A step of the alternating BMI scheme was infeasible.
    #[error("infeasible step: {0}")]
    InfeasibleStep(String),
    /// Synthetic data generation blew up.
    #[error("generation error: {0}")]
    Generation(String),
    /// Degenerate input (e.g. empty singular value spectrum).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Solver backend failure with diagnostics.
    #[error("solver error: {0}")]
    Solver(String),
    /// Invalid experiment configuration.
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
