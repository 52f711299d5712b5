use alloc::string::String;

/// Errors surfaced by the core algorithms.
///
/// The CLI maps these onto process exit codes: configuration and sizing
/// problems are usage errors, ingestion problems are data errors, and
/// `Numerical` aborts a run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn sizing(msg: impl Into<String>) -> Self {
        Error::Sizing(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
