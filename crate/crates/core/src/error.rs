use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence too short{}: length {length} < required {required}", fmt_scale(*scale))]
    SequenceTooShort {
        scale: Option<usize>,
        length: usize,
        required: usize,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid residue {letter:?} at position {position}")]
    Alphabet { letter: char, position: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate accession {0}")]
    Duplicate(String),

    #[error("{0} is undefined for constant input")]
    Undefined(&'static str),

    #[error("optimizer step rejected: {0}")]
    StepRejected(String),

    #[error("missing embedding for accession {0}")]
    MissingInput(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing variant {letter} at position {position}")]
    MissingVariant { position: usize, letter: char },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_scale(scale: Option<usize>) -> String {
    match scale {
        Some(s) => format!(" at scale {s}"),
        None => String::new(),
    }
}
