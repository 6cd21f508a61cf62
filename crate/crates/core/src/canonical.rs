//! Canonical text encoding shared by logs, exports, state dumps and scenario
//! round-trips: compact JSON with struct fields in declaration order and all
//! maps ordered by key.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ContentDigest;

pub fn to_text<T: Serialize + ?Sized>(value: &T) -> String {
    // Only non-string map keys can fail, and no domain type has those.
    serde_json::to_string(value).expect("domain types always serialize")
}

pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn digest<T: Serialize + ?Sized>(value: &T) -> ContentDigest {
    ContentDigest::of(to_text(value).as_bytes())
}
