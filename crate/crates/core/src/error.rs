use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric positive definite (pivot {pivot} at index {index})")]
    NonSpd { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (|a_ij - a_ji| = {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("epsilon must be > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("membership weight is negative or its normalizer vanishes (anchor {anchor}); use softmax stabilization")]
    NegativeWeight { anchor: usize },
    #[error("invalid membership: {0}")]
    InvalidMembership(String),
    #[error("feature columns must be unit-normalized")]
    NotUnitNormalized,
    #[error("map is rank deficient: {0}")]
    RankDeficient(String),
    #[error("point lies off the image of the affine map (residual {0:e})")]
    OffManifold(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("density is not normalized")]
    NotNormalized,
    #[error("batch too small: {0}")]
    BatchTooSmall(String),
    #[error("feature dimension {0} has batch variance below 1e-12")]
    DegenerateVariance(usize),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },
    #[error("ragged rows: row {row} has {got} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("need at least two distinct labels")]
    DegenerateLabels,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("series too short: need {need}, got {got}")]
    SeriesTooShort { need: usize, got: usize },
    #[error("unsupported mode: {0}")]
    ModeUnsupported(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
