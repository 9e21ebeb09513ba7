use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown target event {0}")]
    UnknownTarget(String),
    #[error("label value {value} outside [0, {horizon}]")]
    LabelOutOfRange { value: f64, horizon: f64 },
    #[error("unknown phase id {phase} (vocabulary has {vocabulary} phases)")]
    UnknownPhase { phase: usize, vocabulary: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("diffusion step {k} outside [{min}, {max}]")]
    StepOutOfRange { k: usize, min: usize, max: usize },
    #[error("unknown conditioning mode `{0}`")]
    UnknownConditioning(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("video {video}: {message}")]
    Data { video: String, message: String },
    #[error("dataset at {}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint does not match the requested model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn data(video: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data { video: video.into(), message: message.into() }
    }
}
