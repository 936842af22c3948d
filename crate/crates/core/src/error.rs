use thiserror::Error;

/// Errors raised by the filtering, simulation, training and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("density has no usable mass (total {mass:e})")]
    ZeroMass { mass: f64 },
    #[error("density must be normalized before this operation")]
    NotNormalized,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("series of length {len} is shorter than one window ({need} points)")]
    TooShort { len: usize, need: usize },
    #[error("window has {len} observations, need {need}")]
    WindowTooShort { len: usize, need: usize },
    #[error("split fractions must lie in (0, 1) and sum below 1 (got train={train}, val={val})")]
    BadFraction { train: f64, val: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("ensemble is empty or too small")]
    EmptyEnsemble,
    #[error("prior vanishes at node {node} where the posterior has mass")]
    SupportMismatch { node: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("optimization diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("particle weights underflowed at step {step}")]
    Degeneracy { step: usize },
    #[error("series contains a non-positive value at index {index}")]
    NonPositive { index: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroMass { .. } => "zero_mass",
            Error::NotNormalized => "not_normalized",
            Error::InvalidParam(_) => "invalid_param",
            Error::TooShort { .. } => "too_short",
            Error::WindowTooShort { .. } => "window_too_short",
            Error::BadFraction { .. } => "bad_fraction",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::SupportMismatch { .. } => "support_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Degeneracy { .. } => "degeneracy",
            Error::NonPositive { .. } => "non_positive",
            Error::EmptySeries => "empty_series",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
