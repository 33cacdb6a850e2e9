use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("failed to read interaction stream: {0}")]
    Ingest(#[source] io::Error),

    #[error("{malformed} of {total} lines are malformed (first bad line {first_bad}: {reason})")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        first_bad: usize,
        reason: String,
    },

    #[error("no interactions to build sequences from")]
    EmptyCorpus,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("item id {id} out of range for vocabulary of {vocab_size} items")]
    ItemOutOfRange { id: u32, vocab_size: usize },

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        /// Parameters at the end of the last epoch that finished cleanly.
        last_good: Box<crate::encoder::ModelParams>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("malformed {what} at line {line}: {reason}")]
    Format {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("cannot compute metrics over an empty case list")]
    NoCases,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
