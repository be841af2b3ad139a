use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the curation engine.
///
/// Every variant maps to a short stable code (see [`Error::code`]) that the
/// HTTP API and the CLI summaries report verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("media is empty")]
    EmptyMedia,
    #[error("record {0} not found")]
    NotFound(String),
    #[error("illegal transition {from} -> {to}")]
    BadTransition { from: String, to: String },
    #[error("unknown caption level {0:?}")]
    UnknownCaptionLevel(String),
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("could not encode image: {0}")]
    Encode(String),
    #[error("image {width}x{height} is too small for border width {border}")]
    TooSmall { width: u32, height: u32, border: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("pagerank did not converge after {iterations} iterations (delta {delta:e})")]
    NoConvergence {
        iterations: usize,
        delta: f64,
        last: Vec<f64>,
    },
    #[error("taxonomy contains a cycle through {0}")]
    Cycle(String),
    #[error("sample {id} needs {tokens} tokens, over the budget of {budget}")]
    OverBudget { id: String, tokens: u64, budget: u64 },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("text box {0:?} is outside the image")]
    BadBox((u32, u32, u32, u32)),
    #[error("unknown font {0:?}")]
    BadFont(String),
    #[error("lease violation on task {0}")]
    LeaseViolation(String),
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyMedia => "empty_media",
            Error::NotFound(_) => "not_found",
            Error::BadTransition { .. } => "bad_transition",
            Error::UnknownCaptionLevel(_) => "bad_caption_level",
            Error::Decode(_) => "decode_error",
            Error::Encode(_) => "encode_error",
            Error::TooSmall { .. } => "too_small",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Cycle(_) => "cycle",
            Error::OverBudget { .. } => "over_budget",
            Error::DuplicateId(_) => "duplicate_id",
            Error::BadBox(_) => "bad_box",
            Error::BadFont(_) => "bad_font",
            Error::LeaseViolation(_) => "lease_violation",
            Error::Config { .. } => "config",
            Error::Prerequisite(_) => "prerequisite",
            Error::Json(_) => "json",
        }
    }

    /// Process exit status for the CLI: 3 config, 2 prerequisite, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 3,
            Error::Prerequisite(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
