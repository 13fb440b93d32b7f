use thiserror::Error;

/// Errors produced anywhere in the estimation and diagnosis pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A model is inconsistent (dimensions, covariance properties, topology).
    #[error("model error: {0}")]
    Model(String),

    /// A numerical failure, tagged with the filter step when one is known.
    #[error("numerical failure{}: {msg}", step.map(|k| format!(" at step {k}")).unwrap_or_default())]
    Numerical { step: Option<usize>, msg: String },

    /// The observability decomposition cannot be built for the given input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Text or CSV input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical { step: None, msg: msg.into() }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    /// Attach a step index to a numerical error that does not carry one yet.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            Error::Numerical { step: None, msg } => Error::Numerical { step: Some(k), msg },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
