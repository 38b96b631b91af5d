use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("label needs {required} frames but only {available} are available")]
    Unalignable { required: usize, available: usize },

    #[error("codepoint {0:?} is not in the vocabulary")]
    UnknownSymbol(char),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("internal state corrupted: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::Unalignable { .. } => "unalignable",
            Error::UnknownSymbol(_) | Error::VocabularyMismatch(_) => "vocabulary",
            Error::NonFinite(_) => "numeric",
            Error::Graph(_) => "graph",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Corrupt(_) => "corrupt",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
