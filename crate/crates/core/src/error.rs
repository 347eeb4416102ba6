use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category not found: {0}")]
    CategoryNotFound(PathBuf),

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("training split contains non-normal directory {0}")]
    NonNormalTrainItem(PathBuf),

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("failed to encode image {path}: {reason}")]
    ImageEncode { path: PathBuf, reason: String },

    #[error("texture directory {0} contains no decodable images")]
    EmptyTextureDirectory(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate mask: anomaly mask stayed empty after {0} attempts")]
    DegenerateMask(usize),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(&'static str),

    #[error("need at least {needed} items, got {got}")]
    NotEnoughItems { needed: usize, got: usize },

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    UnsupportedCheckpointVersion { found: String, expected: String },

    #[error("frozen encoder mismatch: checkpoint has {checkpoint}, provided encoder is {provided}")]
    EncoderMismatch { checkpoint: String, provided: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration}: l1={l1} focal={focal} total={total}")]
    NonFiniteLoss {
        iteration: usize,
        l1: f64,
        focal: f64,
        total: f64,
    },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CategoryNotFound(_) => "category_not_found",
            Error::MissingDirectory(_) => "missing_directory",
            Error::NonNormalTrainItem(_) => "non_normal_train_item",
            Error::ImageDecode { .. } => "image_decode",
            Error::ImageEncode { .. } => "image_encode",
            Error::EmptyTextureDirectory(_) => "empty_texture_directory",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DegenerateMask(_) => "degenerate_mask",
            Error::AurocUndefined(_) => "auroc_undefined",
            Error::NotEnoughItems { .. } => "not_enough_items",
            Error::UnsupportedCheckpointVersion { .. } => "unsupported_checkpoint_version",
            Error::EncoderMismatch { .. } => "encoder_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::MissingParameter(_) => "missing_parameter",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::ConfigParse(_) => "config_parse",
        }
    }

    /// True for errors caused by user input (bad paths, bad config), as
    /// opposed to failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::ConfigParse(_)
                | Error::CategoryNotFound(_)
                | Error::MissingDirectory(_)
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
