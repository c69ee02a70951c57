use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("inversion is degenerate at step {step}: zero noise variance")]
    InversionDegenerate { step: usize },

    #[error("attention plan error: {0}")]
    Plan(String),

    #[error("backbone error: {0}")]
    Backbone(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
