use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("quaternion norm {0} is not within tolerance of 1")]
    NonUnitQuaternion(f64),
    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("frame size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("empty mask: no pixels to evaluate")]
    EmptyMask,
    #[error("degenerate render: no Gaussian is visible")]
    DegenerateRender,
    #[error("too few correspondences: {found} (need {required})")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("no RANSAC hypothesis reached {required} inliers (best {best})")]
    RansacFailed { best: usize, required: usize },
    #[error("unknown shape `{0}`")]
    UnknownShape(String),
    #[error("PLY error: {0}")]
    Ply(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
