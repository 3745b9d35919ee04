use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("waveform too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("alignment row {row}: malformed ({reason})")]
    MalformedRow { row: usize, reason: String },

    #[error("alignment row {row}: end {end} is not after start {start}")]
    Interval { row: usize, start: f64, end: f64 },

    #[error("alignment row {row}: starts at {start} before previous end {prev_end}")]
    Overlap { row: usize, start: f64, prev_end: f64 },

    #[error("alignment row {row}: unknown phoneme `{symbol}`")]
    UnknownPhoneme { row: usize, symbol: String },

    #[error("word `{0}` is not in the lexicon")]
    OutOfLexicon(String),

    #[error("empty mask for {0}")]
    EmptyMask(&'static str),

    #[error("masked region is {width} frames wide, SSIM window needs {window}")]
    RegionTooSmall { width: usize, window: usize },

    #[error("TTT mask overlaps the edit region at {0} frame(s)")]
    MaskOverlap(usize),

    #[error("diffusion step {t} outside [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("frozen parameter group `{0}` changed during adaptation")]
    FrozenDrift(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
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
