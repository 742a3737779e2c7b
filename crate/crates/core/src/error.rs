use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown modality name `{0}`")]
    UnknownModality(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("conditioning error: dataset identifier {id} outside registry range 0..{count}")]
    Conditioning { id: usize, count: usize },

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("untrainable: {0}")]
    Untrainable(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty task: {0}")]
    EmptyTask(String),

    #[error("sample failed validation: {}", .0.join("; "))]
    InvalidSample(Vec<String>),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownModality(_) => "unknown_modality",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Field { .. } => "field",
            Error::Shape(_) => "shape",
            Error::InvalidTask(_) => "invalid_task",
            Error::Conditioning { .. } => "conditioning",
            Error::Constraint(_) => "constraint",
            Error::Untrainable(_) => "untrainable",
            Error::Schedule(_) => "schedule",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyTask(_) => "empty_task",
            Error::InvalidSample(_) => "invalid_sample",
            Error::MissingParam(_) => "missing_param",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    /// Offending config field, when known.
    pub fn field_name(&self) -> Option<&str> {
        match self {
            Error::Field { field, .. } => Some(field),
            _ => None,
        }
    }

    /// True for errors caused by bad inputs rather than failures during work.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Checkpoint(_))
    }
}
