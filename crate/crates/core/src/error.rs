use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape has zero spatial variance")]
    DegenerateShape,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("landmark count mismatch: expected {expected}, found {found}")]
    LandmarkMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no sample has survival flag v = 1")]
    NoSurvivors,
    #[error("normal equations are singular (mu = 0 with a rank-deficient Gram matrix)")]
    SingularSystem,
    #[error("landmark {landmark} lacks a {missing} training sample")]
    InsufficientClass { landmark: usize, missing: &'static str },
    #[error("point configuration is degenerate (near-collinear triple)")]
    DegenerateConfiguration,
    #[error("no landmark combination passed the stability threshold")]
    NoStableCombination,
    #[error("at least {required} labeled shapes are required, got {found}")]
    InsufficientShapes { required: usize, found: usize },
    #[error("seed set contains no manually labeled sample")]
    EmptySeed,
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    InvalidRatios(Vec<f64>),
    #[error("inter-pupil distance is zero")]
    ZeroPupilDistance,
    #[error("input is constant; rank correlation is undefined")]
    ConstantInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("image error: {0}")]
    Image(String),
    #[error("model container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::MalformedFile { path: path.into(), reason: reason.into() }
    }
}
