use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error{}: {msg}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    Ingest { record: Option<usize>, msg: String },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("group {group}: {source}")]
    Group {
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than a bug.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Group { source, .. } => source.is_user_error(),
            Error::Config(_) | Error::Shape(_) | Error::Usage(_) | Error::Ingest { .. } | Error::Checkpoint(_) => true,
            Error::Io(_) | Error::Json(_) => true,
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
