use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize },

    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("columns are not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("invariant subspace has dimension {achieved}, need {required}")]
    InsufficientInvariantSubspace { achieved: usize, required: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory lengths differ: full has {full}, compressed has {compressed}")]
    TrajectoryLengthMismatch { full: usize, compressed: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_of(m: &crate::linalg::Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}
