use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("depth alignment underdetermined: {support} known pixels (need at least {required})")]
    AlignmentUnderdetermined { support: usize, required: usize },

    #[error("expansion step {step}: known mask is empty, pose is disconnected from the scene")]
    DisconnectedView { step: usize },

    #[error("denoising step {step} outside schedule (0, {max}]")]
    ScheduleOutOfRange { step: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("plugin failure during {stage}: {message}")]
    Plugin { stage: String, message: String },

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("bundle {0} is locked by another pipeline")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    /// Tags a plugin error with the pipeline stage it happened in.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Plugin { message, .. } => Error::Plugin {
                stage: stage.to_string(),
                message,
            },
            Error::Wire(message) => Error::Plugin {
                stage: stage.to_string(),
                message,
            },
            other => other,
        }
    }
}
