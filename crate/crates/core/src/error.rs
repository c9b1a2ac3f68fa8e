use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {what} {index} out of range (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid UTF-8 at byte offset {offset}{}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Encoding { offset: usize, line: Option<usize> },

    #[error("alignment error: source has {source_lines} lines but target has {target_lines}")]
    Alignment { source_lines: usize, target_lines: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: nothing to translate")]
    EmptyInput,

    #[error("non-finite loss {loss} at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { loss: f64, batch: usize, epoch: usize },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint schema error: {0}")]
    Schema(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for failures of the filesystem or a stream rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Stream(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
