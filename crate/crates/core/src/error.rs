use thiserror::Error;

pub type Result<T, E = EarlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EarlError {
    #[error("input shape: {0}")]
    InputShape(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rule is not supported by the data: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EarlError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        EarlError::InputShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        EarlError::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        EarlError::Numerical(msg.into())
    }
}
