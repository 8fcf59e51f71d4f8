use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated file: expected {expected} bytes of {what}, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("insufficient {class} examples: need {needed}, have {available}")]
    InsufficientExamples {
        class: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("example {id} carries neither {tag:?} nor its complement")]
    MissingTag { id: String, tag: String },

    #[error("unknown example id {0:?}")]
    UnknownExample(String),

    #[error("input contains a single class; both labels are required")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("model has no calibrated JumpReLU threshold")]
    Uncalibrated,

    #[error("cannot reach {target} active latents per token; at most {achievable:.4} are positive")]
    CalibrationUnattainable { target: usize, achievable: f64 },

    #[error("difference matrix has rank zero (all examples identical)")]
    RankZero,

    #[error("template error: {0}")]
    Template(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },

    #[error("yes/no logits absent")]
    MissingLogits,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Stable, machine-parsable name of the error kind.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidHeader(_) => "invalid_header",
            Error::Invariant(_) => "invariant",
            Error::InsufficientExamples { .. } => "insufficient_examples",
            Error::MissingTag { .. } => "missing_tag",
            Error::UnknownExample(_) => "unknown_example",
            Error::SingleClass => "single_class",
            Error::Empty(_) => "empty_input",
            Error::NotConverged { .. } => "not_converged",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Uncalibrated => "uncalibrated",
            Error::CalibrationUnattainable { .. } => "calibration_unattainable",
            Error::RankZero => "rank_zero",
            Error::Template(_) => "template",
            Error::Protocol(_) => "protocol",
            Error::Transport { .. } => "transport",
            Error::MissingLogits => "missing_logits",
            Error::Invalid(_) => "invalid",
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport { transient: true, .. })
    }

    pub(crate) fn dims(what: &str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch(format!("{what}: expected {expected}, got {actual}"))
    }
}
