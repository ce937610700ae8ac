use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dialogue `{id}`: {reason}")]
    InvalidDialogue { id: String, reason: String },

    #[error("annotator rejected for dialogue `{dialogue}` utterance {utterance}: {reason}")]
    Annotation {
        dialogue: String,
        utterance: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("emotion id {id} outside range 0..{n_emo}")]
    EmotionOutOfRange { id: usize, n_emo: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("keyword pair ({head}, {tail}) never observed")]
    AbsentPair { head: String, tail: String },

    #[error("corpus has no annotations: {0}")]
    Unannotated(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("missing {what} at {path}; run `{command}` first")]
    MissingArtifact {
        what: String,
        path: PathBuf,
        command: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
