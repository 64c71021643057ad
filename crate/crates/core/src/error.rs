use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate row for date {date}, ticker {ticker}")]
    Duplicate { date: String, ticker: String },

    #[error("no date is shared by every ticker")]
    EmptyIntersection,

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid action: {0}")]
    Action(String),

    #[error("episode error: {0}")]
    Episode(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
