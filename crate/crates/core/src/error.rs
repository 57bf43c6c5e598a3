use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}, grad norm {grad_norm}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Data(_)
            | Error::Format(_)
            | Error::Corruption(_)
            | Error::Io { .. }
            | Error::Setup(_)
            | Error::Dimension(_) => 2,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Domain(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
