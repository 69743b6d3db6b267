use std::path::PathBuf;

use thiserror::Error;

impl Error {
    pub(crate) fn in_step(step: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Pipeline {
            step,
            source: Box::new(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("noise energy must be positive, got {0}")]
    NonPositiveNoiseEnergy(f64),
    #[error("literal mixing formula requires a positive energy ratio, got {0}")]
    NonPositiveEnergyRatio(f64),
    #[error("noise pool is empty")]
    EmptyNoisePool,
    #[error("mix window [{start}, {start}+{len}) exceeds {what} of length {available}")]
    WindowOutOfRange {
        what: &'static str,
        start: usize,
        len: usize,
        available: usize,
    },

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),
    #[error("unsupported frame shift {0} ms (expected 20, 40 or 80)")]
    UnsupportedFrameShift(u32),
    #[error("k-means needs at least {k} frames, got {frames}")]
    TooFewFrames { frames: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid downsampling factor {0} (expected 2 or 4)")]
    InvalidFactor(usize),
    #[error("sequence belongs to `{found}`, expected `{expected}`")]
    MismatchedUtterance { expected: String, found: String },
    #[error("no finest-resolution sequence to fuse onto")]
    MissingFinestResolution,
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("clip `{id}` lasts {duration} s, longer than the {cap} s batch cap")]
    OversizedClip { id: String, duration: f64, cap: f64 },
    #[error("stage {0} has an empty manifest")]
    EmptyStage(usize),
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("trainer failed at stage {stage}, step {step}: {source}")]
    Trainer {
        stage: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: u32, k: usize },
    #[error("non-finite loss {loss} at step {step} (max |param| = {max_abs_param})")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        max_abs_param: f64,
    },

    #[error("reference text is empty")]
    EmptyReference,
    #[error("score table incomplete: model `{model}` has no result for task `{task}`")]
    IncompleteTable { model: String, task: String },

    #[error("malformed binary file: {0}")]
    Format(String),
    #[error("{step} failed")]
    Pipeline {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("runs with the same seed differ in {0:?}")]
    NonDeterministic(Vec<String>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
