use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; the message names the offending axis.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("AUC undefined: scores contain a single class")]
    SingleClass,

    #[error("no feasible policy satisfies the constraints")]
    NoFeasiblePolicy,

    #[error("corrupt or unsupported file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
