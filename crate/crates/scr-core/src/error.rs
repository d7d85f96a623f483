//! Error type shared by all modules of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate word '{word}' at line {line} (multiple pronunciations are not supported)")]
    DuplicateWord { word: String, line: usize },

    #[error("out-of-vocabulary word '{word}'")]
    Oov { word: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("CTC alignment infeasible: label needs at least {needed} frames, got {got}")]
    CtcInfeasible { needed: usize, got: usize },

    #[error("frame label {label} out of range (output units: {units})")]
    LabelOutOfRange { label: usize, units: usize },

    #[error("confuser set is empty")]
    EmptyConfusers,

    #[error("degenerate misclassification denominator (sum of confuser losses <= {0:e})")]
    DegenerateDenominator(f64),

    #[error("commands {a} and {b} expand to identical state sequences")]
    DuplicateStateSequence { a: usize, b: usize },

    #[error("command {prefix}'s state sequence is a strict prefix of command {longer}'s")]
    PrefixCollision { prefix: usize, longer: usize },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("manifest references missing file: {0}")]
    MissingFile(String),

    #[error("input has zero signal power")]
    ZeroPower,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
