use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point outside the region where a model's curvature functions are valid
    /// (a sign-region crossing, a kink of an absolute value, a non-positive eigenvalue).
    #[error("domain violation: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The discrete update is unstable: some eta * lambda is at least 2.
    #[error("unstable step: eta * lambda = {product} >= 2 (lambda = {lambda})")]
    Instability { product: f64, lambda: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The request is too large for the exact route; the message names the alternative.
    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("projection failed after {steps} GD steps (best loss {best_loss:e}, threshold {threshold:e})")]
    ProjectionFailure { steps: usize, best_loss: f64, threshold: f64 },

    #[error("training diverged at step {step}: loss {loss:e} exceeds 10x initial {initial:e}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
