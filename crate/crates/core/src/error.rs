use std::fmt;

use serde::{Deserialize, Serialize};

/// Source position inside DSL text, 1-based.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl Span {
    pub fn new(line: usize, col: usize) -> Self {
        Self { line, col }
    }
}

// Spans are positional metadata; two specs that differ only in layout are the
// same model.
impl PartialEq for Span {
    fn eq(&self, _other: &Self) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("optimizer diverged at step {step}: {msg}")]
    OptimizerDivergence { step: usize, msg: String },

    #[error("parse error at {span}: {msg} (expected one of: {})", expected.join(", "))]
    Parse {
        span: Span,
        msg: String,
        expected: Vec<String>,
    },

    #[error("simulation diverged at step {step}: {msg}")]
    SimDivergence { step: usize, msg: String },

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable code, used in run logs and prompts.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "SHAPE_ERROR",
            Error::NumericGuard(_) => "NUMERIC_GUARD_ERROR",
            Error::Contract(_) => "CONTRACT_ERROR",
            Error::OptimizerDivergence { .. } => "OPTIMIZER_DIVERGENCE",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::SimDivergence { .. } => "SIM_DIVERGENCE",
            Error::Ingest(_) => "INGEST_ERROR",
            Error::Generator(_) => "GENERATOR_ERROR",
            Error::Format(_) => "FORMAT_ERROR",
            Error::Training { source, .. } => source.code(),
            Error::Io(_) => "IO_ERROR",
        }
    }

    /// Source position when the failure points into DSL text.
    pub fn span(&self) -> Option<Span> {
        match self {
            Error::Parse { span, .. } => Some(*span),
            Error::Training { source, .. } => source.span(),
            _ => None,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
