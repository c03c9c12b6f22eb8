use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecRgError {
    #[error("restricted operator is numerically singular (sigma_min = {sigma_min:e}, floor = {floor:e})")]
    SingularRestriction { sigma_min: f64, floor: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Neumann series does not contract (ratio estimate {ratio:.3e})")]
    ContractionFailure { ratio: f64 },

    #[error("cutoff nesting violated: {0}")]
    NestingViolation(String),

    #[error("tau fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    FixedPointDivergence { iterations: usize, residual: f64 },

    #[error("no sign change of the renormalized spectral parameter on [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("scale {step} needs a frame beyond the {shells} available shells")]
    ShellExhausted { step: usize, shells: usize },

    #[error("mode {mode} is not an infrared mode (|k| = {k_abs}, sigma = {sigma})")]
    ModeNotIR { mode: usize, k_abs: f64, sigma: f64 },

    #[error("toy mode {mode} is resonant (omega = {omega:e})")]
    ResonantMode { mode: usize, omega: f64 },

    #[error("{what} did not converge")]
    NonConvergence { what: String },

    #[error("monomial degree {degree} exceeds the cap {cap}")]
    DegreeCapExceeded { degree: usize, cap: usize },

    #[error("basis dimension {dim} exceeds the cap {cap}")]
    DimensionOverflow { dim: usize, cap: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
}

pub type Result<T> = std::result::Result<T, SpecRgError>;
