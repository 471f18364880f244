//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unknown tensor kind byte {0}")]
    BadKind(u8),

    #[error("truncated payload: header claims {expected} values, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("trailing bytes after payload: {0} extra bytes")]
    TrailingBytes(usize),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty tensor: n={n}, d={d}")]
    EmptyTensor { n: usize, d: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample count mismatch: expected {expected}, got {got}")]
    SampleMismatch { expected: usize, got: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("need at least {needed} samples, have {have}")]
    TooFewSamples { needed: usize, have: usize },

    #[error("invalid rank k={k} for dimension d={d}")]
    InvalidRank { k: usize, d: usize },

    #[error("rank mismatch: {a} vs {b}")]
    RankMismatch { a: usize, b: usize },

    #[error("activation covariance has numerical rank {rank} after truncation, below requested k={k}")]
    RankDeficient { rank: usize, k: usize },

    #[error("degenerate gradients: ||Sigma_gg||_F = {norm:e}")]
    DegenerateGradients { norm: f64 },

    #[error("zero activation covariance")]
    ZeroActivations,

    #[error("zero-variance weighted covariance")]
    ZeroWeightedVariance,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("layer width {width} exceeds the finite-difference Hessian limit {limit}")]
    WidthTooLarge { width: usize, limit: usize },

    #[error("non-finite finite-difference Hessian")]
    NonFiniteHessian,

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
