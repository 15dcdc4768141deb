use thiserror::Error;

use crate::datamodel::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Transport failures exhausted the retry budget.
    #[error("backend `{backend}` unavailable after {attempts} attempt(s){}: {message}", fmt_context(.context))]
    BackendUnavailable {
        backend: String,
        attempts: u32,
        message: String,
        context: Option<String>,
    },

    /// The backend answered with a non-retryable error status.
    #[error("backend `{backend}` rejected the request (HTTP {status}){}: {message}", fmt_context(.context))]
    BackendRejected {
        backend: String,
        status: u16,
        message: String,
        context: Option<String>,
    },

    #[error("backend `{backend}` sent a malformed response: {message}")]
    Protocol { backend: String, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("directive `{directive}` is not supported for {task} prompts")]
    UnsupportedDirective { directive: String, task: String },

    #[error("story `{story_id}` is too short to split into {parts} segments")]
    DegenerateStory { story_id: String, parts: usize },

    #[error("image `{key}` could not be decoded: {message}")]
    ImageFormat { key: String, message: String },

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("invalid experiment spec: {}", join_violations(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("refusing to resume: {0}")]
    ResumeRefused(String),

    #[error("run `{run_id}` aborted: {failed} of {total} items failed")]
    RunAborted {
        run_id: String,
        failed: usize,
        total: usize,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the sample (or story turn) being processed to backend errors.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::BackendUnavailable {
                backend,
                attempts,
                message,
                ..
            } => Error::BackendUnavailable {
                backend,
                attempts,
                message,
                context: Some(ctx.into()),
            },
            Error::BackendRejected {
                backend,
                status,
                message,
                ..
            } => Error::BackendRejected {
                backend,
                status,
                message,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }

    /// True for failures that mark a single item as failed rather than the run.
    pub fn is_item_failure(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable { .. }
                | Error::BackendRejected { .. }
                | Error::Protocol { .. }
                | Error::ImageFormat { .. }
        )
    }
}

fn fmt_context(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" while processing `{c}`"),
        None => String::new(),
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
