//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by geometry, solvers, generators and file I/O.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The normal equations of a quadric fit are numerically rank deficient
    /// (e.g. all neighbourhood points collinear). Carries the achieved rank.
    #[error("degenerate fit: normal equations have rank {rank} of 6")]
    DegenerateFit { rank: usize },

    /// A solver found too few usable correspondences to constrain a pose.
    #[error("insufficient overlap: {found} usable correspondences, need at least {required}")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("pose pair graph is disconnected")]
    DisconnectedPairGraph,

    /// A quadric Hessian block cannot be inverted (condition number >= 1e12).
    /// The joint solver reacts by freezing that quadric for the iteration.
    #[error("singular quadric block {index}")]
    SingularQuadricBlock { index: usize },

    #[error("rank-deficient pose system: reduced pose matrix is not positive definite")]
    RankDeficientPoses,

    /// The reference pose (index 0) must stay fixed at identity.
    #[error("gauge violation: pose 0 must be the identity")]
    GaugeViolation,

    /// Curvature comparison found no pixel valid in both maps.
    #[error("empty overlap: no pixel is valid in both curvature maps")]
    EmptyOverlap,

    #[error("unknown method '{0}'")]
    UnknownMethod(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl std::fmt::Display, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
