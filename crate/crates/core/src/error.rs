use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed entity line: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: span {start}..{end} out of range for text of length {len}")]
    OffsetOutOfRange {
        line: usize,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("line {line}: annotated surface {annotated:?} does not match text {found:?}")]
    SurfaceMismatch {
        line: usize,
        annotated: String,
        found: String,
    },

    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },

    #[error("line {line}: schema error: {reason}")]
    Schema { line: usize, reason: String },

    #[error("line {line}: invalid probability vector: {reason}")]
    Probability { line: usize, reason: String },

    #[error("duplicate row for document {doc_id:?} token {index}")]
    DuplicateRow { doc_id: String, index: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("no input: {0}")]
    EmptyInput(&'static str),

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("weights do not match ensemble members: {0}")]
    WeightMismatch(String),

    #[error("{tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },

    #[error("spans are not sorted by (start, end)")]
    UnsortedInput,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage}{}: {source}", path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    Stage {
        stage: &'static str,
        path: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap this error with the pipeline stage (and file) it came from.
    pub fn in_stage(self, stage: &'static str, path: Option<PathBuf>) -> Self {
        Error::Stage {
            stage,
            path,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 for configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
