//! Structured controller event log.
//!
//! One record per line: `time \t instance \t event \t future \t detail`, with
//! `-` standing in for an absent future. Oracle tests parse these lines back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FutureId, Location, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Create,
    Route,
    Submit,
    Enqueue,
    Start,
    Resolve,
    Fail,
    Register,
    Deliver,
    Forward,
    /// Numbered step of the migration handshake (1..=6).
    MigrateStep(u8),
    MigrateAbort,
    MigrateReject,
    MigrateDefer,
    CommandApplied,
    CommandDropped,
    Preempt,
    Provision,
    Kill,
    Terminate,
    Request,
    Complete,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Create => "create",
            EventKind::Route => "route",
            EventKind::Submit => "submit",
            EventKind::Enqueue => "enqueue",
            EventKind::Start => "start",
            EventKind::Resolve => "resolve",
            EventKind::Fail => "fail",
            EventKind::Register => "register",
            EventKind::Deliver => "deliver",
            EventKind::Forward => "forward",
            EventKind::MigrateStep(n) => return write!(f, "migrate-{n}"),
            EventKind::MigrateAbort => "migrate-abort",
            EventKind::MigrateReject => "migrate-reject",
            EventKind::MigrateDefer => "migrate-defer",
            EventKind::CommandApplied => "command-applied",
            EventKind::CommandDropped => "command-dropped",
            EventKind::Preempt => "preempt",
            EventKind::Provision => "provision",
            EventKind::Kill => "kill",
            EventKind::Terminate => "terminate",
            EventKind::Request => "request",
            EventKind::Complete => "complete",
        };
        f.write_str(s)
    }
}

impl FromStr for EventKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(n) = s
            .strip_prefix("migrate-")
            .and_then(|n| n.parse::<u8>().ok())
        {
            return Ok(EventKind::MigrateStep(n));
        }
        Ok(match s {
            "create" => EventKind::Create,
            "route" => EventKind::Route,
            "submit" => EventKind::Submit,
            "enqueue" => EventKind::Enqueue,
            "start" => EventKind::Start,
            "resolve" => EventKind::Resolve,
            "fail" => EventKind::Fail,
            "register" => EventKind::Register,
            "deliver" => EventKind::Deliver,
            "forward" => EventKind::Forward,
            "migrate-abort" => EventKind::MigrateAbort,
            "migrate-reject" => EventKind::MigrateReject,
            "migrate-defer" => EventKind::MigrateDefer,
            "command-applied" => EventKind::CommandApplied,
            "command-dropped" => EventKind::CommandDropped,
            "preempt" => EventKind::Preempt,
            "provision" => EventKind::Provision,
            "kill" => EventKind::Kill,
            "terminate" => EventKind::Terminate,
            "request" => EventKind::Request,
            "complete" => EventKind::Complete,
            _ => return Err(Error::Parse(format!("event kind `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub time: SimTime,
    pub instance: Location,
    pub event: EventKind,
    pub future: Option<FutureId>,
    pub detail: String,
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t", self.time, self.instance, self.event)?;
        match self.future {
            Some(id) => write!(f, "{id}")?,
            None => f.write_str("-")?,
        }
        write!(f, "\t{}", self.detail)
    }
}

impl FromStr for EventRecord {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.splitn(5, '\t');
        let mut next = || {
            parts
                .next()
                .ok_or_else(|| Error::Parse(format!("event line `{line}`")))
        };
        let time = next()?;
        let (secs, frac) = time
            .split_once('.')
            .ok_or_else(|| Error::Parse(format!("event time `{time}`")))?;
        let micros = secs
            .parse::<u64>()
            .ok()
            .zip(frac.parse::<u64>().ok())
            .map(|(s, f)| s * 1000 + f)
            .ok_or_else(|| Error::Parse(format!("event time `{time}`")))?;
        let instance = next()?.parse()?;
        let event = next()?.parse()?;
        let future = match next()? {
            "-" => None,
            s => Some(s.parse()?),
        };
        let detail = next()?.to_string();
        Ok(EventRecord {
            time: SimTime(micros),
            instance,
            event,
            future,
            detail,
        })
    }
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        time: SimTime,
        instance: &Location,
        event: EventKind,
        future: Option<FutureId>,
        detail: impl Into<String>,
    ) {
        self.records.push(EventRecord {
            time,
            instance: instance.clone(),
            event,
            future,
            detail: detail.into(),
        });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter(move |r| r.event == kind)
    }

    /// Newline-delimited text form.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        for r in &self.records {
            use std::fmt::Write;
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vec<EventRecord>> {
        text.lines()
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect()
    }
}
