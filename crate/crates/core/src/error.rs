use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: |M[{row},{col}] - M[{col},{row}]| = {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPsd { min_eig: f64, max_eig: f64 },

    #[error("matrix is numerically singular: Cholesky failed with jitter up to {jitter:e}")]
    Singular { jitter: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel is not differentiable at the requested point")]
    NotDifferentiable,

    #[error("Nystrom rank {rank} exceeds the number of filling pairs {ell}")]
    RankTooLarge { rank: usize, ell: usize },

    #[error(
        "Nystrom block is singular beyond the jitter ladder; lower the rank (currently {rank})"
    )]
    NystromSingular { rank: usize },

    #[error("every grid cell failed")]
    AllCellsFailed,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 for usage, input and configuration problems,
    /// 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::Config { .. }
            | Error::Parse { .. }
            | Error::File { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::DimensionMismatch { .. }
            | Error::EmptySamples
            | Error::RankTooLarge { .. } => 1,
            _ => 2,
        }
    }
}

/// Opens `path` for reading, naming it in the error.
pub fn open_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })
}

/// Creates `path` for writing, naming it in the error.
pub fn create_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })
}

pub type Result<T> = std::result::Result<T, Error>;
