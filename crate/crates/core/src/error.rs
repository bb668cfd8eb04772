use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = AnysegError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AnysegError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("modality set is empty")]
    EmptyModalitySet,
    #[error("modality {0} is missing")]
    MissingModality(crate::modality::Modality),
    #[error("label {label} at position {position} is outside [0, {classes})")]
    LabelOutOfRange {
        position: usize,
        label: usize,
        classes: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checksum mismatch in {what}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum {
        what: String,
        stored: u64,
        computed: u64,
    },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl AnysegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AnysegError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            AnysegError::Autodiff(_) => "autodiff",
            AnysegError::Shape(_) => "shape",
            AnysegError::Config(_) => "config",
            AnysegError::EmptyModalitySet => "empty_modality_set",
            AnysegError::MissingModality(_) => "missing_modality",
            AnysegError::LabelOutOfRange { .. } => "label_out_of_range",
            AnysegError::Io { .. } => "io",
            AnysegError::Format(_) => "format",
            AnysegError::Checksum { .. } => "checksum",
            AnysegError::NonFiniteLoss { .. } => "non_finite_loss",
            AnysegError::Invariant(_) => "invariant",
        }
    }
}
