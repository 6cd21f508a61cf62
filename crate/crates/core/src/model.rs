//! Shared domain types: identifiers, future records, agent descriptors and
//! control commands.
//!
//! Every type here is plain data. Mutation of a [`FutureRecord`] goes through
//! the owning component controller, which uses [`FutureRecord::transition`]
//! so that the lifecycle relation is enforced in one place.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

/// Virtual or wall time in microseconds since the start of a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis_f64(ms: f64) -> SimTime {
        SimTime((ms * 1000.0).round().max(0.0) as u64)
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkflowId(pub u32);

/// Identity of a future: the workflow run it belongs to plus a per-workflow
/// creation sequence number. Rendered as `<workflow>.<sequence>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FutureId {
    pub workflow: WorkflowId,
    pub seq: u64,
}

impl FutureId {
    pub fn new(workflow: u32, seq: u64) -> Self {
        FutureId {
            workflow: WorkflowId(workflow),
            seq,
        }
    }
}

impl fmt::Display for FutureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.workflow.0, self.seq)
    }
}

impl FromStr for FutureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (w, q) = s
            .split_once('.')
            .ok_or_else(|| Error::Parse(format!("future id `{s}`")))?;
        Ok(FutureId::new(
            w.parse()
                .map_err(|_| Error::Parse(format!("future id `{s}`")))?,
            q.parse()
                .map_err(|_| Error::Parse(format!("future id `{s}`")))?,
        ))
    }
}

string_serde!(FutureId);

/// Hands out future ids with a zero-initialized counter per workflow.
#[derive(Debug, Default, Clone)]
pub struct FutureIdAllocator {
    next: HashMap<WorkflowId, u64>,
}

impl FutureIdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_future_id(&mut self, workflow: WorkflowId) -> FutureId {
        let slot = self.next.entry(workflow).or_insert(0);
        let id = FutureId {
            workflow,
            seq: *slot,
        };
        *slot += 1;
        id
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl FromStr for SessionId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('s')
            .and_then(|n| n.parse().ok())
            .map(SessionId)
            .ok_or_else(|| Error::Parse(format!("session id `{s}`")))
    }
}

string_serde!(SessionId);

/// Agent type name plus instance number, rendered `agentType:instance`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub agent_type: String,
    pub instance: u32,
}

impl Location {
    pub fn new(agent_type: impl Into<String>, instance: u32) -> Self {
        Location {
            agent_type: agent_type.into(),
            instance,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.agent_type, self.instance)
    }
}

impl FromStr for Location {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, i) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Parse(format!("location `{s}`")))?;
        if a.is_empty() {
            return Err(Error::Parse(format!("location `{s}`")));
        }
        Ok(Location::new(
            a,
            i.parse()
                .map_err(|_| Error::Parse(format!("location `{s}`")))?,
        ))
    }
}

string_serde!(Location);

/// Opaque immutable value bytes.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Payload(Arc<[u8]>);

impl Payload {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Payload(Arc::from(bytes.into()))
    }

    pub fn text(s: impl AsRef<str>) -> Self {
        Payload::new(s.as_ref().as_bytes().to_vec())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.0).ok()
    }

    pub fn digest(&self) -> ContentDigest {
        ContentDigest::of(&self.0)
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_str() {
            Some(s) => write!(f, "Payload({s:?})"),
            None => write!(f, "Payload(0x{})", hex::encode(&self.0)),
        }
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s)
            .map(Payload::new)
            .map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of a byte string.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn of(bytes: &[u8]) -> Self {
        let out = Sha256::digest(bytes);
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        ContentDigest(d)
    }

    /// First 8 bytes as a big-endian integer; handy for seeding.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", self.short())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FutureState {
    Created,
    WaitingDeps,
    Queued,
    Running,
    Resolved,
    Failed,
    Migrating,
}

impl FutureState {
    pub const ALL: [FutureState; 7] = [
        FutureState::Created,
        FutureState::WaitingDeps,
        FutureState::Queued,
        FutureState::Running,
        FutureState::Resolved,
        FutureState::Failed,
        FutureState::Migrating,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, FutureState::Resolved | FutureState::Failed)
    }
}

/// The lifecycle relation. Any non-terminal state may fail; a running future
/// may be migrated only through a preemption hook, which the controller
/// checks separately.
pub fn validate_transition(from: FutureState, to: FutureState) -> bool {
    use FutureState::*;
    matches!(
        (from, to),
        (Created, WaitingDeps | Queued)
            | (WaitingDeps, Queued | Migrating)
            | (Queued, Running | Migrating)
            | (Running, Resolved | Migrating)
            | (Migrating, WaitingDeps | Queued)
            | (Created | WaitingDeps | Queued | Running | Migrating, Failed)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub agent_type: String,
    pub method: String,
}

impl Target {
    pub fn new(agent_type: impl Into<String>, method: impl Into<String>) -> Self {
        Target {
            agent_type: agent_type.into(),
            method: method.into(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.agent_type, self.method)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Value(Payload),
    Future(FutureId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub future: FutureId,
    pub producer: Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub location: Option<Location>,
    pub message: String,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl FailureRecord {
    pub fn new(location: Option<Location>, message: impl Into<String>) -> Self {
        FailureRecord {
            location,
            message: message.into(),
            diagnostics: Vec::new(),
        }
    }
}

impl fmt::Display for FailureRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Some(l) => write!(f, "{} at {}", self.message, l)?,
            None => f.write_str(&self.message)?,
        }
        for d in &self.diagnostics {
            write!(f, "; {d}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub created: SimTime,
    pub queued: Option<SimTime>,
    pub started: Option<SimTime>,
    pub resolved: Option<SimTime>,
}

/// A pending or materialized agent call together with its coordination
/// metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureRecord {
    pub id: FutureId,
    pub session: SessionId,
    pub target: Target,
    pub args: Vec<Arg>,
    pub dependencies: Vec<Dependency>,
    pub creator: Location,
    pub executor: Location,
    pub consumers: Vec<Location>,
    pub state: FutureState,
    pub value: Option<Payload>,
    pub failure: Option<FailureRecord>,
    pub priority: i32,
    pub timestamps: Timestamps,
    /// Logical call-site name, stable across runs (e.g. `r0/dev[2]#1`).
    pub label: String,
    /// Creation-chain depth: 1 for a call without dependencies.
    pub depth: u32,
    /// Number of completed migrations.
    pub epoch: u32,
}

impl FutureRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: FutureId,
        session: SessionId,
        target: Target,
        args: Vec<Arg>,
        dependencies: Vec<Dependency>,
        creator: Location,
        executor: Location,
        label: String,
        depth: u32,
        now: SimTime,
    ) -> Result<Self> {
        for a in &args {
            if let Arg::Future(f) = a {
                if !dependencies.iter().any(|d| d.future == *f) {
                    return Err(Error::InvariantViolation(format!(
                        "argument {f} of {id} is not a declared dependency"
                    )));
                }
            }
        }
        Ok(FutureRecord {
            id,
            session,
            target,
            args,
            dependencies,
            creator,
            executor,
            consumers: Vec::new(),
            state: FutureState::Created,
            value: None,
            failure: None,
            priority: 0,
            timestamps: Timestamps {
                created: now,
                ..Default::default()
            },
            label,
            depth,
            epoch: 0,
        })
    }

    pub fn transition(&mut self, to: FutureState) -> Result<()> {
        if !validate_transition(self.state, to) {
            return Err(Error::InvalidTransition {
                future: self.id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    /// Materializes the value. The value is write-once.
    pub fn resolve(&mut self, value: Payload, now: SimTime) -> Result<()> {
        if self.value.is_some() {
            return Err(Error::InvariantViolation(format!(
                "{} resolved twice",
                self.id
            )));
        }
        self.transition(FutureState::Resolved)?;
        self.value = Some(value);
        self.timestamps.resolved = Some(now);
        Ok(())
    }

    pub fn fail(&mut self, failure: FailureRecord, now: SimTime) -> Result<()> {
        self.transition(FutureState::Failed)?;
        self.failure = Some(failure);
        self.timestamps.resolved = Some(now);
        Ok(())
    }

    /// Appends a consumer; returns false if it was already present.
    pub fn add_consumer(&mut self, consumer: Location) -> bool {
        if self.consumers.contains(&consumer) {
            false
        } else {
            self.consumers.push(consumer);
            true
        }
    }

    pub fn depends_on(&self, dep: FutureId) -> bool {
        self.dependencies.iter().any(|d| d.future == dep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentDirectives {
    pub stateful: bool,
    pub batchable: bool,
    /// Largest batch a batchable agent accepts.
    pub max_batch: u32,
    /// Name of the preemption hook, if running calls may be preempted.
    pub preemptable: Option<String>,
    /// The agent keeps session state in managed lists/dicts.
    pub managed_state: bool,
    pub max_instances: u32,
    pub min_instances: u32,
    pub resources: BTreeMap<String, f64>,
}

impl Default for AgentDirectives {
    fn default() -> Self {
        AgentDirectives {
            stateful: false,
            batchable: false,
            max_batch: 8,
            preemptable: None,
            managed_state: false,
            max_instances: 16,
            min_instances: 1,
            resources: BTreeMap::new(),
        }
    }
}

impl AgentDirectives {
    pub fn validate(&self, agent: &str) -> Result<()> {
        let path = |f: &str| format!("agents.{agent}.directives.{f}");
        if self.max_instances == 0 {
            return Err(Error::config(path("max_instances"), "must be positive"));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::config(
                path("min_instances"),
                format!(
                    "{} exceeds max_instances {}",
                    self.min_instances, self.max_instances
                ),
            ));
        }
        if self.batchable && self.managed_state {
            return Err(Error::config(
                path("batchable"),
                "managed state cannot be combined with batchable agents",
            ));
        }
        if self.batchable && self.max_batch == 0 {
            return Err(Error::config(path("max_batch"), "must be positive"));
        }
        for (k, v) in &self.resources {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::config(
                    path(&format!("resources.{k}")),
                    "must be a non-negative number",
                ));
            }
        }
        Ok(())
    }

    /// Session affinity is required for stateful and managed-state agents.
    pub fn pins_sessions(&self) -> bool {
        self.stateful || self.managed_state
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDecl {
    pub name: String,
    #[serde(default)]
    pub params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDescriptor {
    pub agent_type: String,
    pub methods: Vec<MethodDecl>,
    #[serde(default)]
    pub directives: AgentDirectives,
    /// Name of the executor profile used to simulate this agent.
    pub executor_profile: String,
}

impl AgentDescriptor {
    pub fn method(&self, name: &str) -> Option<&MethodDecl> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agent_type.is_empty()
            || self.agent_type.contains(':')
            || self.agent_type.contains('/')
        {
            return Err(Error::config(
                "agents",
                format!("bad agent type name `{}`", self.agent_type),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::config(
                format!("agents.{}.methods", self.agent_type),
                "no methods declared",
            ));
        }
        self.directives.validate(&self.agent_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrateTarget {
    Session(SessionId),
    Future(FutureId),
}

impl fmt::Display for MigrateTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MigrateTarget::Session(s) => write!(f, "{s}"),
            MigrateTarget::Future(id) => write!(f, "{id}"),
        }
    }
}

pub type NodeId = u32;

/// One global-controller primitive invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlCommand {
    Route {
        session: SessionId,
        agent_type: String,
        instance: Location,
    },
    RouteWeighted {
        agent_type: String,
        instances: Vec<Location>,
        weights: Vec<f64>,
    },
    SetPriority {
        session: SessionId,
        priority: i32,
        agent_type: Option<String>,
    },
    Migrate {
        target: MigrateTarget,
        source: Location,
        destination: Location,
    },
    Kill {
        instance: Location,
    },
    Provision {
        agent_type: String,
        node: NodeId,
    },
}

impl ControlCommand {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCommand(m));
        match self {
            ControlCommand::Route {
                agent_type,
                instance,
                ..
            } => {
                if &instance.agent_type != agent_type {
                    return bad(format!(
                        "route target {instance} is not a `{agent_type}` instance"
                    ));
                }
            }
            ControlCommand::RouteWeighted {
                agent_type,
                instances,
                weights,
            } => {
                if instances.is_empty() || instances.len() != weights.len() {
                    return bad(format!(
                        "route_weighted needs equal non-empty lists, got {} instances / {} weights",
                        instances.len(),
                        weights.len()
                    ));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return bad("weights must be finite and non-negative".into());
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return bad("weights must sum to a positive value".into());
                }
                if let Some(i) = instances.iter().find(|i| &i.agent_type != agent_type) {
                    return bad(format!("{i} is not a `{agent_type}` instance"));
                }
            }
            ControlCommand::SetPriority { .. } => {}
            ControlCommand::Migrate {
                source,
                destination,
                ..
            } => {
                if source == destination {
                    return bad(format!("migrate source and destination are both {source}"));
                }
                if source.agent_type != destination.agent_type {
                    return bad(format!(
                        "migrate {source} -> {destination} crosses agent types"
                    ));
                }
            }
            ControlCommand::Kill { .. } | ControlCommand::Provision { .. } => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Route { .. } => "route",
            ControlCommand::RouteWeighted { .. } => "route_weighted",
            ControlCommand::SetPriority { .. } => "set_priority",
            ControlCommand::Migrate { .. } => "migrate",
            ControlCommand::Kill { .. } => "kill",
            ControlCommand::Provision { .. } => "provision",
        }
    }
}

impl fmt::Display for ControlCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::canonical::to_text(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn future_ids_are_per_workflow_counters() {
        let mut ids = FutureIdAllocator::new();
        let w = WorkflowId(7);
        assert_eq!(ids.next_future_id(w), FutureId::new(7, 0));
        assert_eq!(ids.next_future_id(w), FutureId::new(7, 1));
        let mut ids = FutureIdAllocator::new();
        assert_eq!(ids.next_future_id(WorkflowId(1)), FutureId::new(1, 0));
        assert_eq!(ids.next_future_id(WorkflowId(2)), FutureId::new(2, 0));
    }

    #[test]
    fn transition_examples() {
        use FutureState::*;
        assert!(!validate_transition(Resolved, Running));
        assert!(validate_transition(Queued, Migrating));
        assert!(!validate_transition(Created, Resolved));
        assert!(validate_transition(Migrating, WaitingDeps));
        assert!(!validate_transition(Failed, Queued));
    }

    #[test]
    fn location_text_form() {
        let l: Location = "coder:3".parse().unwrap();
        assert_eq!(l, Location::new("coder", 3));
        assert_eq!(l.to_string(), "coder:3");
        assert!("nocolon".parse::<Location>().is_err());
        assert!(":1".parse::<Location>().is_err());
    }

    #[test]
    fn record_rejects_undeclared_future_args() {
        let id = FutureId::new(0, 1);
        let r = FutureRecord::new(
            id,
            SessionId(0),
            Target::new("a", "m"),
            vec![Arg::Future(FutureId::new(0, 0))],
            vec![],
            Location::new("driver", 0),
            Location::new("a", 0),
            "x".into(),
            1,
            SimTime::ZERO,
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn resolved_value_is_write_once() {
        let mut r = FutureRecord::new(
            FutureId::new(0, 0),
            SessionId(0),
            Target::new("a", "m"),
            vec![],
            vec![],
            Location::new("driver", 0),
            Location::new("a", 0),
            "x".into(),
            1,
            SimTime::ZERO,
        )
        .unwrap();
        r.transition(FutureState::Queued).unwrap();
        r.transition(FutureState::Running).unwrap();
        r.resolve(Payload::text("v"), SimTime(5)).unwrap();
        assert!(r.resolve(Payload::text("w"), SimTime(6)).is_err());
        assert_eq!(r.value, Some(Payload::text("v")));
    }

    #[test]
    fn command_validation() {
        let a0 = Location::new("a", 0);
        let a1 = Location::new("a", 1);
        let same = ControlCommand::Migrate {
            target: MigrateTarget::Session(SessionId(1)),
            source: a0.clone(),
            destination: a0.clone(),
        };
        assert!(same.validate().is_err());
        let cross = ControlCommand::Migrate {
            target: MigrateTarget::Session(SessionId(1)),
            source: a0.clone(),
            destination: Location::new("b", 0),
        };
        assert!(cross.validate().is_err());
        let lopsided = ControlCommand::RouteWeighted {
            agent_type: "a".into(),
            instances: vec![a0.clone(), a1.clone()],
            weights: vec![1.0],
        };
        assert!(lopsided.validate().is_err());
        let zero = ControlCommand::RouteWeighted {
            agent_type: "a".into(),
            instances: vec![a0.clone(), a1.clone()],
            weights: vec![0.0, 0.0],
        };
        assert!(zero.validate().is_err());
        let ok = ControlCommand::RouteWeighted {
            agent_type: "a".into(),
            instances: vec![a0, a1],
            weights: vec![2.0, 1.0],
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn batchable_with_managed_state_is_rejected() {
        let d = AgentDirectives {
            batchable: true,
            managed_state: true,
            ..Default::default()
        };
        assert!(matches!(d.validate("llm"), Err(Error::Config { .. })));
    }
}
