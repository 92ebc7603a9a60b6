use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate shape {0}: height and width must both be >= 2")]
    DegenerateShape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown {kind} id {id} (vocabulary size {len})")]
    Vocabulary {
        kind: &'static str,
        id: usize,
        len: usize,
    },

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("no reverse steps remaining")]
    NoStepsRemaining,

    #[error("model has no adapters attached")]
    NoAdapters,

    #[error("adapters already attached")]
    AdaptersAlreadyAttached,

    #[error("metric {0:?} is not registered")]
    MetricNotAvailable(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
