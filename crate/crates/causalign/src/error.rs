use std::path::PathBuf;

/// Unified error type for the crate.
///
/// Variants carry enough context to act on: file paths, line numbers for
/// corpus parse errors, sample identifiers for numeric failures, and the
/// expected/actual pair for shape and fingerprint mismatches.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed sample: {reason}")]
    MalformedSample {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("failed to parse {what} at {path}: {reason}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("missing artifact: {what} not found at {path}; {hint}")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("sample {user_id:?} packs to {got} tokens, exceeding the maximum context of {max}")]
    ContextOverflow {
        user_id: String,
        got: usize,
        max: usize,
    },

    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("non-finite {what} encountered for sample {user_id:?}")]
    NonFinite { what: &'static str, user_id: String },

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    FingerprintMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),

    #[error(
        "gradient check failed: max relative error {max_rel_err:.3e} (threshold {threshold:.1e}) in {worst}"
    )]
    GradCheckFailed {
        max_rel_err: f64,
        threshold: f64,
        worst: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
