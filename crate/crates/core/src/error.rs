use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline, from file ingestion to statistics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("irregular sampling: gap deviation {deviation_s:.6} s exceeds 1% of the sample period")]
    IrregularSampling { deviation_s: f64 },
    #[error("upsampling requested ({target_hz} Hz > {rate_hz} Hz)")]
    UpsampleRequested { rate_hz: f64, target_hz: f64 },
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("signal too short: {0}")]
    SignalTooShort(String),
    #[error("no beats found")]
    NoBeatsFound,
    #[error("insufficient beats: {0}")]
    InsufficientBeats(String),
    #[error("series too short: {len} points, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("too few windows: {0}")]
    TooFewWindows(usize),
    #[error("mask excludes every cell")]
    EmptyMask,
    /// Training diverged; carries the last parameters that were still finite.
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_finite: Box<crate::model::ModelState>,
    },
    #[error("checkpoint version/config mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("empty input")]
    EmptyInput,
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("too few methods or datasets: {0}")]
    TooFewMethods(String),
    #[error("unknown control method {0:?}")]
    UnknownControl(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
