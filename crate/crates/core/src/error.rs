use std::fmt;

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid gradient scheme: {0}")]
    Scheme(String),

    #[error("invalid NIfTI data: {0}")]
    Nifti(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("voxel ({x}, {y}, {z}): {source}")]
    Voxel {
        x: usize,
        y: usize,
        z: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed input, geometry conflicts, IO.
    Data,
    /// Singular systems, non-finite values.
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Singular(_) | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Voxel { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn at_voxel(self, [x, y, z]: [usize; 3]) -> Error {
        Error::Voxel {
            x,
            y,
            z,
            source: Box::new(self),
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorKind::Data => f.write_str("data"),
            ErrorKind::Numerical => f.write_str("numerical"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
