use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("unknown lead name `{0}`")]
    UnknownLead(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("window [{start}, {end}] s is outside the record (duration {duration} s)")]
    WindowOutOfRange { start: f64, end: f64, duration: f64 },

    #[error("invalid lead selection: {0}")]
    LeadSelection(String),

    #[error("clip must be {expected} samples, got {got}")]
    ClipLength { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("prompt has {placeholders} ECG placeholders but {ecgs} ECGs were supplied")]
    PlaceholderMismatch { placeholders: usize, ecgs: usize },

    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("LoRA rank mismatch: {0}")]
    RankMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
