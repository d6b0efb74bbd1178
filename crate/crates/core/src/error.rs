use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty region: masked statistics need at least one selected pixel")]
    EmptyRegion,
    #[error("empty softmax input")]
    EmptySoftmax,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
