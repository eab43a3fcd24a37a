use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("compression is numerically singular (condition number {condition:.3e})")]
    SingularCompression { condition: f64 },

    #[error(
        "distortion budget gamma = {gamma:.6e} is below the minimum feasible distortion \
         {min_gamma:.6e} for rank {k}"
    )]
    InfeasibleDistortion { gamma: f64, min_gamma: f64, k: usize },

    #[error("target rank {target} not attained; closest rank {closest} at beta = {beta:.3e}")]
    RankNotAttained {
        target: usize,
        closest: usize,
        beta: f64,
    },

    #[error("degenerate sample: {zero_fraction:.1}% of k-th neighbour distances are zero")]
    DegenerateSample { zero_fraction: f64 },

    #[error("class {label} has {count} samples, need at least {needed}")]
    ClassTooSmall { label: i8, count: usize, needed: usize },

    #[error("root finder failed to bracket the multiplier")]
    BracketFailure,

    #[error("eigendecomposition failed")]
    Decomposition,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
