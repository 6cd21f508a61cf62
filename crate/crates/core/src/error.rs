use crate::model::{FutureId, FutureState, Location, SessionId};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown agent type `{0}`")]
    UnknownAgent(String),

    #[error("agent `{agent}` declares no method `{method}`")]
    UnknownMethod { agent: String, method: String },

    #[error("unknown future {0}")]
    UnknownFuture(FutureId),

    #[error("unknown instance {0} (not registered or already killed)")]
    UnknownInstance(Location),

    #[error("no live instance of `{0}`")]
    NoLiveInstance(String),

    #[error("illegal transition {from:?} -> {to:?} for {future}")]
    InvalidTransition {
        future: FutureId,
        from: FutureState,
        to: FutureState,
    },

    #[error("invalid control command: {0}")]
    InvalidCommand(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("migration of {future} rejected: {reason}")]
    MigrationRejected { future: FutureId, reason: String },

    #[error("state of {session} accessed from {instance}, home is {home}")]
    StateAccess {
        session: SessionId,
        instance: Location,
        home: Location,
    },

    #[error("directive bound violated: {0}")]
    DirectiveBound(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
