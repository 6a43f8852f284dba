use thiserror::Error;

/// Errors raised by the samplers, estimators and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of an analytic formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration that violates a documented invariant. Raised before
    /// any sampling happens.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The covariance matrix has an eigenvalue below the clipping tolerance.
    #[error("covariance is not positive semidefinite: eigenvalue {eigenvalue:.3e} below tolerance -{tolerance:.3e}")]
    Factorization { eigenvalue: f64, tolerance: f64 },

    /// An iteration guard tripped. Carries the partial state reached.
    #[error("iteration cap of {cap} steps exceeded (partial h = {h}, s = {s})")]
    IterationCap { cap: u64, h: f64, s: f64 },

    #[error("unknown test function `{0}` (expected one of: one, exp_neg, bump)")]
    UnknownTestFunction(String),

    /// Conditioned sampling whose acceptance rate is too small to be useful.
    #[error("acceptance rate {rate:.2e} below {floor:.0e}; raise eta")]
    AcceptanceTooLow { rate: f64, floor: f64 },

    /// Experiment parameters that do not match the declared schema.
    #[error("schema violation: {0}")]
    Schema(String),

    /// An internal consistency check failed.
    #[error("internal assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
