use thiserror::Error;

/// Errors produced by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("frame is off the rotation manifold (residual {residual:.3e})")]
    Manifold { residual: f64 },

    #[error("projection onto SO(3) failed: {0}")]
    Projection(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
