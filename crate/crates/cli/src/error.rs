use easynlp_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("--{flag}: {message}")]
pub struct UsageError {
    pub flag: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(#[from] UsageError),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn usage(flag: &str, message: impl Into<String>) -> Self {
        CliError::Usage(UsageError {
            flag: flag.to_string(),
            message: message.into(),
        })
    }

    /// 2 for usage errors, 3 for problems with the input data, 4 for
    /// model, checkpoint and format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core { source, .. } => match source {
                CoreError::Parse(_)
                | CoreError::Schema(_)
                | CoreError::Registry { .. }
                | CoreError::Label(_)
                | CoreError::Domain(_)
                | CoreError::Template(_)
                | CoreError::Io(_) => EXIT_DATA,
                _ => EXIT_MODEL,
            },
        }
    }
}

/// Attaches the flag or step a lower-level error came from.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for easynlp_core::Result<T> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what.to_string(),
            source,
        })
    }
}
