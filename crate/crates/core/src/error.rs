use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("span error: {0}")]
    Span(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("numerical divergence: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
