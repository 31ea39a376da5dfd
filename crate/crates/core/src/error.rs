use thiserror::Error;

pub type Result<T> = std::result::Result<T, MistError>;

#[derive(Debug, Error)]
pub enum MistError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token {token} out of range [0, {vocab})")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("style {style} out of range [0, {styles})")]
    StyleOutOfRange { style: usize, styles: usize },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("length mismatch: hypothesis {hyp} vs reference {reference}")]
    LengthMismatch { hyp: usize, reference: usize },

    #[error("pretraining requires a single-style dataset, found styles {0:?}")]
    MultiStylePretrain(Vec<usize>),

    #[error("content encoder must be frozen before stage-2 training")]
    ContentEncoderNotFrozen,

    #[error("non-finite loss at epoch {epoch}, step {step}: {what}")]
    NonFinite {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MistError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MistError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        MistError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
