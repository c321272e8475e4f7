use std::io;

use thiserror::Error;

/// Every failure the library can report, grouped by category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the category. Codes start at 10 so they never
    /// collide with the argument parser's usage error (2).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 10,
            Error::Dimension(_) => 11,
            Error::Numeric(_) => 12,
            Error::Config(_) => 13,
            Error::Load(_) => 14,
            Error::UnsupportedMode(_) => 15,
            Error::Io(_) => 16,
            Error::Json(_) => 17,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
