use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("missing embedding for class `{0}`")]
    MissingEmbedding(String),

    #[error("missing embedding for sample `{0}`")]
    MissingSample(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("label {label} out of range for {channels} channels")]
    LabelRange { label: u8, channels: usize },

    #[error("non-deterministic objective: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("infeasible task spec: {0}")]
    Spec(String),

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
