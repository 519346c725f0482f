use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid generation config: {0}")]
    InvalidConfig(String),

    /// A generated sequence could not be split into a question and an answer.
    #[error("malformed q-a pair: {0}")]
    MalformedPair(String),

    /// A loss or gradient became non-finite while processing one training pair.
    #[error("non-finite value in loss for pair `{pair_id}`: {detail}")]
    Numerical { pair_id: String, detail: String },

    #[error("infeasible corpus spec: {0}")]
    InvalidSpec(String),

    /// Malformed corpus / scored file; `line` is 1-based.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    /// A QAGS component failed; `stage` names which one.
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user-supplied data or configuration.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::Format { .. }
            | Error::MalformedPair(_)
            | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            Error::Numerical { .. } | Error::Io(_) => false,
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
