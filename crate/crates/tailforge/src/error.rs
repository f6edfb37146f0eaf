//! Crate-wide error type and exit-code mapping for the CLI.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Validation problems (bad arguments, malformed input files, shape
/// mismatches) map to process exit code 1; runtime failures (I/O, missing
/// files, training divergence) map to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Degenerate numeric input, e.g. a zero-norm vector passed to cosine
    /// similarity. Never silently coerced to a value.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("missing payload file: {}", .0.display())]
    MissingPayload(PathBuf),

    #[error("malformed tensor file: {0}")]
    MalformedTensor(String),

    /// Training produced a non-finite loss; carries diagnostics.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach a pipeline stage label to an error.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// CLI exit code: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidArgument(_)
            | Error::DegenerateInput(_)
            | Error::ShapeMismatch(_)
            | Error::MalformedManifest(_)
            | Error::MalformedTensor(_) => 1,
            Error::MissingPayload(_) | Error::Diverged(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
