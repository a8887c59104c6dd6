use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or flags.
    Usage,
    /// File access or parse failures, including malformed tensor shapes.
    Io,
    /// Non-finite data, undefined spectra, SVD failures.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"FST1\"")]
    BadMagic { found: [u8; 4] },
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing data after tensor payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("tensor has ndim = 0")]
    ZeroNdim,
    #[error("nonzero header padding {0:?}")]
    BadPadding([u8; 2]),
    #[error("invalid extent {extent} on axis {axis}")]
    BadExtent { axis: usize, extent: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid mask: row {row} has no admissible entry")]
    InvalidMask { row: usize },
    #[error("spectrum has no positive entry")]
    UndefinedSpectrum,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("timestep {t} is outside the fusion stage ({tau}, {t_max}]")]
    OutOfStage { t: f64, tau: f64, t_max: f64 },
    #[error("window multiple {multiple} covers {frames} frames, sequence has {total}")]
    WindowExceedsSequence {
        multiple: usize,
        frames: usize,
        total: usize,
    },
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdConvergence { rows: usize, cols: usize },
    #[error("report serialization failed: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes { .. }
            | Error::BadDtype(_)
            | Error::ZeroNdim
            | Error::BadPadding(_)
            | Error::BadExtent { .. }
            | Error::Shape(_)
            | Error::Serialize(_) => ErrorKind::Io,
            Error::InvalidSize(_)
            | Error::InvalidMask { .. }
            | Error::Parameter(_)
            | Error::OutOfStage { .. }
            | Error::WindowExceedsSequence { .. } => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::UndefinedSpectrum | Error::SvdConvergence { .. } => {
                ErrorKind::Numerical
            }
        }
    }
}
