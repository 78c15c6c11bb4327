use thiserror::Error;

/// Errors shared by all numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported dimension d={0} (grids are built for d in {{2,3}})")]
    UnsupportedDimension(usize),

    #[error("boundary guard: coordinate {index} of p is {value:.3e}, below the floor {floor:.1e}")]
    BoundaryGuard { index: usize, value: f64, floor: f64 },

    #[error("CFL violation: dt={dt:.3e} exceeds the stable step for max drift {max_drift:.3e} and dx={dx:.3e}; try dt <= {suggested:.3e}")]
    CflViolation {
        dt: f64,
        dx: f64,
        max_drift: f64,
        suggested: f64,
    },

    #[error("Picard iteration did not converge within {max_iters} sweeps (last residuals: {history:?})")]
    PicardNonConvergence { max_iters: usize, history: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
