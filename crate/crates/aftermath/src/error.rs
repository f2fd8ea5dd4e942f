//! Crate-wide error type.
//!
//! Variants are grouped by failure class so that callers (the CLI in
//! particular) can map them onto stable exit codes: usage/configuration
//! problems, numerical failures, and I/O failures.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was invoked in a way its contract forbids
    /// (wrong architecture tag, empty dataset, backward on a non-scalar, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A class label or index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// The regression design matrix is rank deficient.
    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    /// Too few samples for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The fitted model cannot be inverted (zero economic-loss coefficient).
    #[error("non-invertible model: {0}")]
    NonInvertible(String),

    /// A numerical quantity became NaN or infinite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A referenced file does not exist.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// A manifest, checkpoint, or model file violates its schema.
    #[error("schema violation: {0}")]
    Schema(String),

    /// Two case records share an id.
    #[error("duplicate case id: {0}")]
    DuplicateId(String),

    /// The same case id appears in more than one split.
    #[error("overlapping splits: id {0} appears in multiple splits")]
    OverlappingSplits(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error: {0}")]
    ImageDecode(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for this error: 2 usage/config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Usage(_)
            | Error::Index(_)
            | Error::Schema(_)
            | Error::DuplicateId(_)
            | Error::OverlappingSplits(_) => 2,
            Error::SingularDesign(_)
            | Error::InsufficientData(_)
            | Error::NonInvertible(_)
            | Error::Numerical(_) => 3,
            Error::MissingFile(_) | Error::Io { .. } | Error::ImageDecode(_) => 4,
        }
    }
}
