use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine and its supporting modules.
#[derive(Debug, Error)]
pub enum EspError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("attention row {row} attends no column")]
    EmptyAttentionRow { row: usize },

    #[error("attention row {row} references block column {col} ahead of itself")]
    ForwardReference { row: usize, col: usize },

    #[error("invalid slot list: {0}")]
    InvalidSlots(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("prompt of {len} tokens too short for last-k init with k={k} (need more than {need})")]
    PromptTooShort { len: usize, k: usize, need: usize },

    #[error("prompt of {len} tokens exceeds context bound {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid branch config: {0}")]
    InvalidBranch(String),

    #[error("vocabulary exhausted: no replacement token left for node {node}")]
    VocabularyExhausted { node: usize },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("layout misuse: {0}")]
    LayoutMisuse(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("horizon {horizon} exceeds available continuation ({available} positions)")]
    HorizonTooLong { horizon: usize, available: usize },

    #[error("bad magic in weights file: expected \"ESPW\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weights format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated weights file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing data in weights file: expected {expected} bytes, got {actual}")]
    TrailingData { expected: usize, actual: usize },

    #[error("malformed JSON on line {line} of {path}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EspError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EspError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by files or the filesystem rather than by
    /// configuration or internal state.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            EspError::Io { .. }
                | EspError::BadMagic { .. }
                | EspError::VersionMismatch { .. }
                | EspError::Truncated { .. }
                | EspError::TrailingData { .. }
                | EspError::MalformedLine { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, EspError>;
