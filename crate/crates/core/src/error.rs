use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no shell with b >= {b_min} in the gradient table")]
    NoEligibleShell { b_min: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel size {k} does not fit volume of spatial size {dims:?}")]
    KernelTooLarge { k: usize, dims: [usize; 3] },

    #[error("invalid kernel bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in input: {0}")]
    NonFiniteInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("slice of {nx}x{ny} is too small for a 3x3 stencil")]
    SliceTooSmall { nx: usize, ny: usize },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),

    #[error("volume dimensions overflow: {0:?}")]
    DimensionOverflow(Vec<i64>),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("insufficient diffusion directions: {0}")]
    InsufficientDirections(String),

    #[error("singular tensor design matrix (collinear b-vectors?)")]
    SingularDesign,

    #[error("overlapping shapes {0} and {1} with overlap forbidden")]
    OverlapPolicyViolation(usize, usize),

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Image(_)
            | Error::CorruptHeader(_)
            | Error::UnsupportedDatatype(_)
            | Error::DimensionOverflow(_)
            | Error::Parse { .. } => ErrorKind::Io,
            Error::NonFiniteInput(_)
            | Error::DegenerateInput(_)
            | Error::SingularDesign
            | Error::EmptyMask => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}
