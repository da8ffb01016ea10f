use thiserror::Error;

/// Errors surfaced by the core library.
///
/// `DataParse` carries the byte offset where decoding failed so the CLI can
/// point at the corruption; `NonFinite` names the ELBO term that produced a
/// NaN/inf gradient so diverging fits abort with a usable diagnostic.
#[derive(Debug, Error)]
pub enum MgpaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed data at byte offset {offset}: {what}")]
    DataParse { offset: u64, what: String },
    #[error("non-finite value in {term}: {what}")]
    NonFinite { term: String, what: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation mismatch: {0}")]
    Evaluation(String),
}

impl MgpaError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MgpaError::ShapeMismatch(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        MgpaError::Contract(msg.into())
    }
}
