use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("label vector has length {labels}, cloud has {points} points")]
    LabelLength { labels: usize, points: usize },

    #[error("requested k = {k} neighbours but only {available} of {n} points are available")]
    NotEnoughPoints { k: usize, available: usize, n: usize },

    #[error("sample count {requested} exceeds cloud size {n}")]
    SampleCount { requested: usize, n: usize },

    #[error("index {index} out of range for {n} points")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("degenerate neighbourhood at point {index}: all neighbours coincide")]
    DegenerateNeighborhood { index: usize },

    #[error("point {index} has {found} neighbours within radius {radius}, need at least {needed}")]
    SparseNeighborhood {
        index: usize,
        radius: f64,
        found: usize,
        needed: usize,
    },

    #[error("no valid point pairs for histogram at point {index}")]
    NoValidPairs { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty transport support at {axis} {index}")]
    EmptySupport { axis: &'static str, index: usize },

    #[error("kernel underflow at {axis} {index}; try a larger regularisation eps (currently {eps})")]
    KernelUnderflow {
        axis: &'static str,
        index: usize,
        eps: f64,
    },

    #[error("all superpoint affinities are zero")]
    ZeroAffinity,

    #[error("no valid feature rows")]
    NoValidRows,

    #[error("bad tensor magic")]
    BadMagic,

    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported tensor dtype {0}")]
    DtypeMismatch(u8),

    #[error("tensor truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after tensor payload")]
    TrailingData(usize),

    #[error("malformed PLY: {0}")]
    PlyFormat(String),

    #[error("unsupported PLY feature: {0}")]
    PlyUnsupported(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short identifier used in single-line CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyCloud => "empty_cloud",
            Error::NonFiniteCoordinate { .. } => "non_finite",
            Error::LabelLength { .. } => "label_length",
            Error::NotEnoughPoints { .. } => "not_enough_points",
            Error::SampleCount { .. } => "sample_count",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DegenerateNeighborhood { .. } => "degenerate_neighborhood",
            Error::SparseNeighborhood { .. } => "sparse_neighborhood",
            Error::NoValidPairs { .. } => "no_valid_pairs",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::EmptySupport { .. } => "empty_support",
            Error::KernelUnderflow { .. } => "kernel_underflow",
            Error::ZeroAffinity => "zero_affinity",
            Error::NoValidRows => "no_valid_rows",
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::DtypeMismatch(_) => "dtype_mismatch",
            Error::Truncated { .. } => "truncated",
            Error::TrailingData(_) => "trailing_data",
            Error::PlyFormat(_) => "ply_format",
            Error::PlyUnsupported(_) => "ply_unsupported",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }

    /// Wraps an I/O failure with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
