use thiserror::Error;

/// Errors raised by model construction, posterior evaluation and the identity checks.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NotFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration space has {count} states, above the exact-enumeration limit of {limit}")]
    EnumerationLimit { count: f64, limit: usize },
    #[error("quadrature too large ({0}); use the monte_carlo strategy instead")]
    QuadratureTooLarge(String),
    #[error("unknown observable or test `{0}`")]
    Unknown(String),
    #[error("posterior mode mismatch: {0}")]
    Mode(String),
    #[error("container format error: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LabError::NotFinite(what))
    }
}
