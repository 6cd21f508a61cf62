//! Workflow programs, agent logic and the driver that runs them.

pub mod driver;
pub mod logic;
pub mod program;
pub mod scenario;

use serde::{Deserialize, Serialize};

use crate::model::{FailureRecord, FutureId, Location, Payload, SessionId};

/// Caller-side reference to a future created through the runtime API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FutureHandle {
    pub id: FutureId,
    pub session: SessionId,
    /// The instance that created the future and receives its value.
    pub home: Location,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValueResult {
    Value(Payload),
    Failure(FailureRecord),
    Timeout,
}

impl ValueResult {
    pub fn value(&self) -> Option<&Payload> {
        match self {
            ValueResult::Value(v) => Some(v),
            _ => None,
        }
    }
}
