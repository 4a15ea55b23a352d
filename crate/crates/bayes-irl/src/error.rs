use thiserror::Error;

/// Errors produced by solvers, estimators, and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "soft value iteration did not converge within {max_iter} iterations \
         (final residual {residual:.3e}, tolerance {tol:.3e})"
    )]
    SolverDidNotConverge {
        residual: f64,
        tol: f64,
        max_iter: usize,
    },

    #[error("occupancy solve failed: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    OccupancySolve { residual: f64, tol: f64 },

    #[error("dataset is empty; averages over transitions are undefined")]
    EmptyDataset,

    #[error("no rollout transitions; rate is undefined")]
    EmptyRollouts,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid dynamics perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("mini-batch of {0} transitions is too small to normalize advantages")]
    BatchTooSmall(usize),

    #[error("training diverged at iteration {iter}: {diagnostic}")]
    Divergence { iter: usize, diagnostic: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 0 success, 2 config/validation,
    /// 3 solver failure, 4 divergence abort, 5 io/serialization.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidMdp(_)
            | Error::ShapeMismatch { .. }
            | Error::IndexOutOfRange(_)
            | Error::InvalidPerturbation(_)
            | Error::EmptyDataset
            | Error::EmptyRollouts
            | Error::BatchTooSmall(_) => 2,
            Error::SolverDidNotConverge { .. } | Error::OccupancySolve { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::Io(_) | Error::Json(_) | Error::TomlParse(_) => 5,
        }
    }
}
