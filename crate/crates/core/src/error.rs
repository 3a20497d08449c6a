use thiserror::Error;

/// Errors surfaced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: need N >= r >= 1, got N={n}, r={r}")]
    InvalidDimension { n: usize, r: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("scale convention mismatch between operands")]
    ConventionMismatch,

    #[error("matrix not on the Stiefel manifold: ||X^T X / s^2 - I||_F = {deviation:.3e}")]
    NotOnManifold { deviation: f64 },

    #[error("vector not tangent: ||X^T U + U^T X||_F = {deviation:.3e}")]
    NotTangent { deviation: f64 },

    #[error("singular matrix: eigenvalue {eigenvalue:.3e} below tolerance {tolerance:.3e}")]
    SingularMatrix { eigenvalue: f64, tolerance: f64 },

    #[error("invalid SNR vector: lambdas must be sorted non-increasing and positive")]
    InvalidLambdas,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("tensor order p={p} at N={n} exceeds the materialization budget of {budget} entries")]
    OutOfBudget { n: usize, p: u32, budget: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("blow-up at t = {t_star:.6e}; requested t = {t:.6e}")]
    BlowUp { t: f64, t_star: f64 },

    #[error("invalid regime/order combination: {0}")]
    InvalidRegime(String),

    #[error("target below start: eps*sqrt(N) = {target:.3e} <= gamma = {gamma:.3e}")]
    OrderingError { target: f64, gamma: f64 },

    #[error("unsupported condition-0 level {0}; only level 1 is supported")]
    UnsupportedLevel(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
