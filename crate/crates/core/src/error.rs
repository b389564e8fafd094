use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?} but got {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for {count} outputs")]
    ClassOutOfRange { index: usize, count: usize },

    #[error("idx {path}: {message} (at byte offset {offset})")]
    Idx {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("insufficient eligible source images: {}", format_shortfalls(.0))]
    Shortfall(Vec<Shortfall>),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One source that could not supply its requested count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub source: String,
    pub requested: usize,
    pub eligible: usize,
}

fn format_shortfalls(items: &[Shortfall]) -> String {
    items
        .iter()
        .map(|s| {
            format!(
                "{} requested {} but only {} eligible (short by {})",
                s.source,
                s.requested,
                s.eligible,
                s.requested - s.eligible
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
