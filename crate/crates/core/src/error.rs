//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's input domain.
    #[error("input domain: {0}")]
    InputDomain(String),

    /// A configuration value is invalid.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint or corpus file failed to parse or validate.
    #[error("format: {context}: {detail}")]
    Format { context: String, detail: String },

    /// Two manifests disagree on the vocabulary layout.
    #[error("vocab mismatch between {left} and {right}: {detail}")]
    VocabMismatch {
        left: String,
        right: String,
        detail: String,
    },

    /// A loss or gradient produced a non-finite value.
    #[error("non-finite value in {component}")]
    NonFinite { component: &'static str },

    /// Training diverged; the step index of the last finite step is reported.
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    /// The frozen reference model changed during preference training.
    #[error("reference model was mutated during preference training")]
    ReferenceMutated,
}

impl Error {
    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
