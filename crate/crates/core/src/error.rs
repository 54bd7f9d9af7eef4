use thiserror::Error;

/// Errors raised by the spectral, propagation and statistics layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-positive spectrum: lowest eigenvalue {lambda} at theta {theta:?}")]
    NonPositiveSpectrum { lambda: f64, theta: Vec<f64> },

    #[error("scalar map is not finite at omega = {omega}")]
    SingularFunction { omega: f64 },

    #[error("band {band} is degenerate at theta {theta:?}")]
    DegenerateBand { theta: Vec<f64>, band: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("field violates the reality constraint (defect {defect:.3e})")]
    NonRealField { defect: f64 },

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("theta grids do not match: {0}")]
    GridMismatch(String),

    #[error(
        "lattice too small: N/2 = {half_extent} but 1.5 * speed * t_max = {required:.3} \
         (speed {speed:.4}, t_max {t_max})"
    )]
    WraparoundRisk {
        half_extent: f64,
        required: f64,
        speed: f64,
        t_max: f64,
    },

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
