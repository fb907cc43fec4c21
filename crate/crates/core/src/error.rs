use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid trace{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidTrace { line: Option<usize>, reason: String },

    #[error("synthetic generation failed: {reason} (achieved peak normalized load {achieved:.4}, skew {skew:.4})")]
    Generation {
        reason: String,
        achieved: f64,
        skew: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("total load is zero; dropped fraction is undefined")]
    ZeroLoad,

    #[error("constrained layer latency is zero; speedup is undefined")]
    ZeroLatency,

    #[error("policy {policy} at gamma {gamma}")]
    Sweep {
        policy: String,
        gamma: String,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidTrace {
            line: None,
            reason: reason.into(),
        }
    }
}
