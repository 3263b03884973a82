use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss node, got shape {0}")]
    NotScalar(Shape),

    #[error("batch norm `{0}` has no running statistics yet; run a train-mode step first")]
    UninitializedRunningStats(String),

    #[error("non-finite value at coordinate {index} ({context})")]
    NonFinite { context: String, index: usize },

    #[error("non-finite gradient in parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, update {update} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss {
        epoch: usize,
        update: usize,
        batch_seed: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("cannot read image {}: {source}", .path.display())]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot write image {}: {source}", .path.display())]
    ImageWrite {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: resolution {found:?} differs from sequence resolution {expected:?}", .path.display())]
    ResolutionMismatch {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("{}: unknown ground-truth code {code} at (x={x}, y={y})", .path.display())]
    UnknownLabel {
        path: PathBuf,
        code: u8,
        x: u32,
        y: u32,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("bad checkpoint magic {0:?}, expected \"MCRC\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable category of the error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => "config",
            Error::MissingDirectory(_) => "missing-directory",
            Error::Io { .. } => "io",
            Error::UnreadableImage { .. } | Error::ImageWrite { .. } => "image",
            Error::ResolutionMismatch { .. } | Error::UnknownLabel { .. } | Error::Data(_) => "data",
            Error::BadMagic(_) | Error::UnsupportedVersion { .. } | Error::Truncated(_) | Error::MalformedCheckpoint(_) => {
                "checkpoint"
            }
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::ShapeMismatch { .. } | Error::NotScalar(_) | Error::UninitializedRunningStats(_) => "internal",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
