use crate::corpus::CorpusReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class, used by the binary to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Parse,
    Validation,
    Transport,
    Contract,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Io => 1,
            ErrorKind::Parse => 10,
            ErrorKind::Validation => 11,
            ErrorKind::Transport => 12,
            ErrorKind::Contract => 13,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("corpus validation failed: {} dangling reference(s), {} duplicate id(s)", .0.dangling.len(), .0.duplicates.len())]
    Validation(Box<CorpusReport>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing predictions for qa ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("duplicate predictions for qa ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),

    #[error("qa id sets differ; symmetric difference: {}", .0.join(", "))]
    QaSetMismatch(Vec<String>),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } | Error::InvalidRecord(_) => ErrorKind::Parse,
            Error::Validation(_) => ErrorKind::Validation,
            Error::Transport(_) | Error::Timeout(_) | Error::MalformedResponse(_) => {
                ErrorKind::Transport
            }
            Error::Contract(_)
            | Error::UndefinedMetric(_)
            | Error::MissingIds(_)
            | Error::DuplicateIds(_)
            | Error::QaSetMismatch(_) => ErrorKind::Contract,
            Error::Config(_) | Error::Io(_) => ErrorKind::Io,
        }
    }
}
