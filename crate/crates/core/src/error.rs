use thiserror::Error;

/// Errors raised by the solver and the statistics built on top of it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cholesky failed even at the largest jitter level.
    #[error("ill-conditioned model: factorization of a {size}x{size} matrix failed after jitter {jitter:e} (condition estimate {condition:e})")]
    IllConditioned {
        size: usize,
        jitter: f64,
        condition: f64,
    },

    /// The ODE right-hand side could not be evaluated (e.g. singular metric).
    #[error("right-hand side evaluation failed at t = {t}: {message}")]
    RhsEvaluation { t: f64, message: String },

    #[error("singular metric at x = {location:?} (condition estimate {condition:e})")]
    SingularMetric { location: Vec<f64>, condition: f64 },

    /// Non-finite evidence at every probed length scale.
    #[error("length-scale optimization failed: no finite evidence among {} probes", trace.len())]
    OptimizationFailed { trace: Vec<(f64, f64)> },

    #[error("degenerate geodesic: {0}")]
    DegenerateGeodesic(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("reference solver failed: {0}")]
    OracleFailure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
