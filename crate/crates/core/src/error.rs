use std::io;

use thiserror::Error;

use crate::dynamics::State;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("optimization error: {0}")]
    Optimization(String),
    /// The expert oracle ran out of steps; the partial trajectory is kept.
    #[error("step budget exhausted after {} states", partial.len())]
    Timeout { partial: Vec<State> },
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
