//! Event-driven controller co-located with each agent instance.
//!
//! A controller owns the futures it executes, routes the futures it creates,
//! pushes resolved values to registered consumers, and carries out migration
//! without involving the global controller. All interaction with other
//! controllers goes through [`Message`]s collected in a [`Ctx`]; the runtime
//! delivers them in per-link FIFO order.

pub mod metrics;
pub mod queue;
pub mod routing;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eventlog::{EventKind, EventLog};
use crate::global::FutureSummary;
use crate::model::{
    AgentDescriptor, Arg, ControlCommand, Dependency, FailureRecord, FutureId, FutureIdAllocator,
    FutureRecord, FutureState, Location, MigrateTarget, Payload, SessionId, SimTime, Target,
    WorkflowId,
};
use crate::sim::profile::ExecutorProfile;
use crate::state::{KvHint, SessionStateBundle, StateLayer};
use crate::store::NodeStore;
use crate::workflow::driver::DriverState;
use crate::workflow::logic::{AgentLogic, CallContext};

pub use metrics::MetricsAccumulator;
pub use queue::LocalQueue;
pub use routing::{RoutingTable, WeightedRule};

pub type Outcome = std::result::Result<Payload, FailureRecord>;

pub const DRIVER_TYPE: &str = "driver";

#[derive(Debug, Clone)]
pub enum Message {
    Submit {
        record: Box<FutureRecord>,
    },
    RegisterConsumer {
        future: FutureId,
        consumer: Location,
    },
    Deliver {
        future: FutureId,
        outcome: Outcome,
    },
    /// Migration step 2: asks a producer whether `dep` was already sent to
    /// `from`, and if not, to send it to `to` instead.
    DepQuery {
        dep: FutureId,
        waiter: FutureId,
        from: Location,
        to: Location,
        keep_source: bool,
    },
    DepReply {
        dep: FutureId,
        waiter: FutureId,
        in_flight: bool,
    },
    ExecutorChanged {
        future: FutureId,
        executor: Location,
        epoch: u32,
    },
    SessionMoved {
        session: SessionId,
        to: Location,
    },
    SessionState {
        bundle: SessionStateBundle,
    },
    Activate {
        record: Box<FutureRecord>,
        deps: Vec<(FutureId, Outcome)>,
    },
    KvHint(KvHint),
}

impl Message {
    /// The future a message concerns, for tombstone forwarding and parking.
    fn subject(&self) -> Option<FutureId> {
        match self {
            Message::RegisterConsumer { future, .. } => Some(*future),
            Message::DepQuery { dep, .. } => Some(*dep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timer {
    NextRequest(SessionId),
}

/// Live instance roster per agent type, maintained by the lifecycle manager.
#[derive(Debug, Clone, Default)]
pub struct Roster {
    live: BTreeMap<String, Vec<Location>>,
}

impl Roster {
    pub fn add(&mut self, loc: Location) {
        let v = self.live.entry(loc.agent_type.clone()).or_default();
        if !v.contains(&loc) {
            v.push(loc);
            v.sort();
        }
    }

    pub fn remove(&mut self, loc: &Location) -> bool {
        match self.live.get_mut(&loc.agent_type) {
            Some(v) => {
                let n = v.len();
                v.retain(|l| l != loc);
                n != v.len()
            }
            None => false,
        }
    }

    pub fn live(&self, agent_type: &str) -> &[Location] {
        self.live.get(agent_type).map_or(&[], |v| v.as_slice())
    }

    pub fn is_live(&self, loc: &Location) -> bool {
        self.live(&loc.agent_type).contains(loc)
    }

    pub fn all(&self) -> impl Iterator<Item = &Location> {
        self.live.values().flatten()
    }
}

/// Read-only environment shared by every controller of a run.
pub struct Env {
    pub seed: u64,
    pub descriptors: BTreeMap<String, Arc<AgentDescriptor>>,
    pub profiles: BTreeMap<String, ExecutorProfile>,
    pub logic: Box<dyn AgentLogic>,
    pub roster: Roster,
    pub kv_hints: bool,
}

impl Env {
    pub fn descriptor(&self, agent_type: &str) -> Result<&Arc<AgentDescriptor>> {
        self.descriptors
            .get(agent_type)
            .ok_or_else(|| Error::UnknownAgent(agent_type.to_string()))
    }

    pub fn profile(&self, agent_type: &str) -> Option<&ExecutorProfile> {
        let d = self.descriptors.get(agent_type)?;
        self.profiles.get(&d.executor_profile)
    }
}

/// Side effects of one handler invocation, drained by the runtime.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub env: &'a Env,
    pub log: &'a mut EventLog,
    pub ids: &'a mut FutureIdAllocator,
    pub out: Vec<(Location, Message)>,
    pub execs: Vec<(u64, SimTime)>,
    pub timers: Vec<(SimTime, Timer)>,
    pub terminated: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(
        now: SimTime,
        env: &'a Env,
        log: &'a mut EventLog,
        ids: &'a mut FutureIdAllocator,
    ) -> Self {
        Ctx {
            now,
            env,
            log,
            ids,
            out: Vec::new(),
            execs: Vec::new(),
            timers: Vec::new(),
            terminated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Live,
    Draining,
    Terminated,
}

#[derive(Debug, Clone)]
struct Hosted {
    record: FutureRecord,
    delivered: BTreeSet<Location>,
}

#[derive(Debug, Clone)]
struct Created {
    executor: Location,
    epoch: u32,
    depth: u32,
}

#[derive(Debug, Clone)]
struct Migration {
    destination: Location,
    pending: BTreeSet<FutureId>,
    awaiting: BTreeSet<FutureId>,
}

pub struct ComponentController {
    loc: Location,
    store: Arc<dyn NodeStore>,
    pub status: Status,
    hosted: BTreeMap<FutureId, Hosted>,
    active: BTreeSet<FutureId>,
    received: BTreeMap<FutureId, Outcome>,
    waiters: BTreeMap<FutureId, BTreeSet<FutureId>>,
    registered: BTreeSet<FutureId>,
    created: BTreeMap<FutureId, Created>,
    forwards: BTreeMap<FutureId, Location>,
    parked: BTreeMap<FutureId, Vec<(Location, Message)>>,
    migrations: BTreeMap<FutureId, Migration>,
    moved_sessions: BTreeMap<SessionId, Location>,
    deferred_sessions: Vec<(SessionId, Location)>,
    session_creator: BTreeMap<SessionId, Location>,
    session_priority: BTreeMap<(SessionId, Option<String>), i32>,
    pub routing: RoutingTable,
    pub queue: LocalQueue,
    pub metrics: MetricsAccumulator,
    pub state: StateLayer,
    running: BTreeMap<u64, Vec<FutureId>>,
    next_exec: u64,
    pub workflow: WorkflowId,
    pub driver: Option<DriverState>,
}

impl ComponentController {
    pub fn new(loc: Location, store: Arc<dyn NodeStore>, env: &Env, now: SimTime) -> Self {
        let profile = env.profile(&loc.agent_type);
        let slots = profile.map_or(1, |p| p.slots);
        let kv_capacity = profile.and_then(|p| p.kv).map_or(u64::MAX, |k| k.capacity);
        store.register_instance(loc.clone());
        ComponentController {
            state: StateLayer::new(loc.clone(), kv_capacity),
            loc,
            store,
            status: Status::Live,
            hosted: BTreeMap::new(),
            active: BTreeSet::new(),
            received: BTreeMap::new(),
            waiters: BTreeMap::new(),
            registered: BTreeSet::new(),
            created: BTreeMap::new(),
            forwards: BTreeMap::new(),
            parked: BTreeMap::new(),
            migrations: BTreeMap::new(),
            moved_sessions: BTreeMap::new(),
            deferred_sessions: Vec::new(),
            session_creator: BTreeMap::new(),
            session_priority: BTreeMap::new(),
            routing: RoutingTable::new(),
            queue: LocalQueue::new(),
            metrics: MetricsAccumulator::new(slots, now),
            running: BTreeMap::new(),
            next_exec: 0,
            workflow: WorkflowId(0),
            driver: None,
        }
    }

    pub fn location(&self) -> &Location {
        &self.loc
    }

    pub fn store(&self) -> &Arc<dyn NodeStore> {
        &self.store
    }

    pub fn record(&self, id: FutureId) -> Option<&FutureRecord> {
        self.hosted.get(&id).map(|h| &h.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &FutureRecord> {
        self.hosted.values().map(|h| &h.record)
    }

    pub fn delivered_to(&self, id: FutureId) -> Option<&BTreeSet<Location>> {
        self.hosted.get(&id).map(|h| &h.delivered)
    }

    pub fn received(&self, id: FutureId) -> Option<&Outcome> {
        self.received.get(&id)
    }

    /// Non-terminal futures hosted here.
    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.running.is_empty()
    }

    /// Where a future that migrated away from here went.
    pub fn forwarded_to(&self, id: FutureId) -> Option<&Location> {
        self.forwards.get(&id)
    }

    pub fn executor_of(&self, id: FutureId) -> Option<&Location> {
        self.created.get(&id).map(|c| &c.executor)
    }

    pub fn depth_of(&self, id: FutureId) -> Option<u32> {
        self.created
            .get(&id)
            .map(|c| c.depth)
            .or_else(|| self.record(id).map(|r| r.depth))
    }

    fn log(
        &self,
        ctx: &mut Ctx,
        kind: EventKind,
        future: Option<FutureId>,
        detail: impl Into<String>,
    ) {
        ctx.log.push(ctx.now, &self.loc, kind, future, detail);
    }

    fn send(&self, ctx: &mut Ctx, to: &Location, msg: Message) {
        ctx.out.push((to.clone(), msg));
    }

    fn descriptor<'e>(&self, ctx: &Ctx<'e>) -> Option<&'e Arc<AgentDescriptor>> {
        ctx.env.descriptors.get(&self.loc.agent_type)
    }

    fn managed_state(&self, ctx: &Ctx) -> bool {
        self.descriptor(ctx)
            .is_some_and(|d| d.directives.managed_state)
    }

    fn publish_summary(&self, id: FutureId, now: SimTime) {
        let Some(h) = self.hosted.get(&id) else {
            return;
        };
        let key = format!("futures/{id}");
        if h.record.state.is_terminal() {
            self.store.remove(&key);
            return;
        }
        let pending = h
            .record
            .dependencies
            .iter()
            .filter(|d| !self.received.contains_key(&d.future))
            .count() as u32;
        let s = FutureSummary::of(&h.record, pending, now);
        let _ = self.store.put(&key, s.encode());
    }

    fn set_state(&mut self, id: FutureId, to: FutureState, ctx: &mut Ctx) -> Result<()> {
        let h = self.hosted.get_mut(&id).ok_or(Error::UnknownFuture(id))?;
        h.record.transition(to)?;
        match to {
            FutureState::Queued => h.record.timestamps.queued = Some(ctx.now),
            FutureState::Running => h.record.timestamps.started = Some(ctx.now),
            _ => {}
        }
        if to.is_terminal() {
            self.active.remove(&id);
        } else {
            self.active.insert(id);
        }
        self.publish_summary(id, ctx.now);
        Ok(())
    }

    fn sync_gauges(&mut self) {
        let migrating = self.migrations.len();
        self.metrics.queue_len = self.queue.len();
        self.metrics.running = self.queue.running_len();
        self.metrics.waiting = self
            .active
            .len()
            .saturating_sub(self.metrics.queue_len + self.metrics.running + migrating);
    }

    // ---- creation and routing (creator side) ----

    /// Creates a future and submits it to a routed executor. Never blocks.
    pub fn create_future(
        &mut self,
        session: SessionId,
        target: Target,
        args: Vec<Arg>,
        label: String,
        ctx: &mut Ctx,
    ) -> Result<FutureId> {
        let desc = ctx.env.descriptor(&target.agent_type)?;
        if desc.method(&target.method).is_none() {
            return Err(Error::UnknownMethod {
                agent: target.agent_type.clone(),
                method: target.method.clone(),
            });
        }
        let mut deps: Vec<Dependency> = Vec::new();
        let mut depth = 1;
        for a in &args {
            if let Arg::Future(f) = a {
                if deps.iter().any(|d| d.future == *f) {
                    continue;
                }
                let (producer, d) = match self.created.get(f) {
                    Some(c) => (c.executor.clone(), c.depth),
                    None => match self.hosted.get(f) {
                        Some(h) => (self.loc.clone(), h.record.depth),
                        None => return Err(Error::UnknownFuture(*f)),
                    },
                };
                depth = depth.max(d + 1);
                deps.push(Dependency {
                    future: *f,
                    producer,
                });
            }
        }
        let id = ctx.ids.next_future_id(self.workflow);
        let pins = desc.directives.pins_sessions();
        let live = ctx.env.roster.live(&target.agent_type);
        let routed = self.routing.route(session, &target.agent_type, live, pins);
        let executor = routed.clone().unwrap_or_else(|| self.loc.clone());
        let mut record = FutureRecord::new(
            id,
            session,
            target.clone(),
            args,
            deps,
            self.loc.clone(),
            executor.clone(),
            label.clone(),
            depth,
            ctx.now,
        )?;
        record.priority = self.priority_for(session, &target.agent_type);
        self.log(
            ctx,
            EventKind::Create,
            Some(id),
            format!("{target} {label}"),
        );
        self.created.insert(
            id,
            Created {
                executor: executor.clone(),
                epoch: 0,
                depth,
            },
        );
        match routed {
            Some(exec) => {
                self.log(ctx, EventKind::Route, Some(id), exec.to_string());
                self.send(
                    ctx,
                    &exec,
                    Message::Submit {
                        record: Box::new(record),
                    },
                );
            }
            None => {
                // Hosted here as a failed future so consumers learn about it.
                let fail = FailureRecord::new(
                    None,
                    format!("no live instance of `{}`", target.agent_type),
                );
                record.fail(fail.clone(), ctx.now)?;
                self.log(ctx, EventKind::Fail, Some(id), fail.to_string());
                self.hosted.insert(
                    id,
                    Hosted {
                        record,
                        delivered: BTreeSet::new(),
                    },
                );
            }
        }
        Ok(id)
    }

    fn priority_for(&self, session: SessionId, agent_type: &str) -> i32 {
        self.session_priority
            .get(&(session, Some(agent_type.to_string())))
            .or_else(|| self.session_priority.get(&(session, None)))
            .copied()
            .unwrap_or(0)
    }

    /// Registers this controller as a consumer of `id`; returns the outcome
    /// if it is already known here.
    pub fn poll(&mut self, id: FutureId, ctx: &mut Ctx) -> Option<Outcome> {
        if let Some(o) = self.received.get(&id) {
            return Some(o.clone());
        }
        if let Some(h) = self.hosted.get(&id) {
            return match h.record.state {
                FutureState::Resolved => h.record.value.clone().map(Ok),
                FutureState::Failed => h.record.failure.clone().map(Err),
                _ => None,
            };
        }
        if self.registered.insert(id) {
            if let Some(c) = self.created.get(&id) {
                let to = c.executor.clone();
                self.send(
                    ctx,
                    &to,
                    Message::RegisterConsumer {
                        future: id,
                        consumer: self.loc.clone(),
                    },
                );
            }
        }
        None
    }

    /// Hosts a driver-level future resolved by the driver itself.
    pub fn create_local(&mut self, session: SessionId, label: String, ctx: &mut Ctx) -> FutureId {
        let id = ctx.ids.next_future_id(self.workflow);
        let target = Target::new(self.loc.agent_type.clone(), "result");
        let mut record = FutureRecord::new(
            id,
            session,
            target,
            Vec::new(),
            Vec::new(),
            self.loc.clone(),
            self.loc.clone(),
            label.clone(),
            1,
            ctx.now,
        )
        .expect("no future args");
        record.priority = self.priority_for(session, &self.loc.agent_type);
        self.log(
            ctx,
            EventKind::Create,
            Some(id),
            format!("{} {label}", record.target),
        );
        self.hosted.insert(
            id,
            Hosted {
                record,
                delivered: BTreeSet::new(),
            },
        );
        self.set_state(id, FutureState::WaitingDeps, ctx)
            .expect("fresh record");
        id
    }

    /// Completes a driver-level future.
    pub fn complete_local(&mut self, id: FutureId, outcome: Outcome, ctx: &mut Ctx) -> Result<()> {
        let state = self
            .hosted
            .get(&id)
            .ok_or(Error::UnknownFuture(id))?
            .record
            .state;
        if state.is_terminal() {
            return Ok(());
        }
        match outcome {
            Ok(v) => {
                self.set_state(id, FutureState::Queued, ctx)?;
                self.set_state(id, FutureState::Running, ctx)?;
                self.resolve(id, v, ctx)
            }
            Err(f) => self.fail_future(id, f, ctx),
        }
    }

    // ---- message handling ----

    pub fn handle(&mut self, from: Location, msg: Message, ctx: &mut Ctx) {
        self.metrics.advance(ctx.now);
        if let Some(f) = msg.subject() {
            if !self.hosted.contains_key(&f) {
                if let Some(to) = self.forwards.get(&f).cloned() {
                    self.log(
                        ctx,
                        EventKind::Forward,
                        Some(f),
                        format!("{} -> {to}", msg_name(&msg)),
                    );
                    self.send(ctx, &to, msg);
                } else {
                    self.parked.entry(f).or_default().push((from, msg));
                }
                return;
            }
        }
        match msg {
            Message::Submit { record } => self.on_submit(*record, ctx),
            Message::RegisterConsumer { future, consumer } => {
                self.on_register(future, consumer, ctx)
            }
            Message::Deliver { future, outcome } => self.on_deliver(future, outcome, ctx),
            Message::DepQuery {
                dep,
                waiter,
                from,
                to,
                keep_source,
            } => self.on_dep_query(dep, waiter, from, to, keep_source, ctx),
            Message::DepReply {
                dep,
                waiter,
                in_flight,
            } => self.on_dep_reply(dep, waiter, in_flight, ctx),
            Message::ExecutorChanged {
                future,
                executor,
                epoch,
            } => {
                if let Some(c) = self.created.get_mut(&future) {
                    if epoch > c.epoch {
                        c.epoch = epoch;
                        c.executor = executor;
                    }
                }
            }
            Message::SessionMoved { session, to } => {
                self.routing.pin(session, to);
            }
            Message::SessionState { bundle } => {
                self.moved_sessions.remove(&bundle.session);
                self.state.install(bundle);
            }
            Message::Activate { record, deps } => self.on_activate(*record, deps, ctx),
            Message::KvHint(h) => {
                self.state.kv.hint(&h, ctx.now);
            }
        }
        self.pump(ctx);
        self.maybe_terminate(ctx);
        self.sync_gauges();
    }

    fn survivor(&self, agent_type: &str, salt: u64, ctx: &Ctx) -> Option<Location> {
        let live: Vec<&Location> = ctx
            .env
            .roster
            .live(agent_type)
            .iter()
            .filter(|l| **l != self.loc)
            .collect();
        if live.is_empty() {
            None
        } else {
            Some(live[(salt % live.len() as u64) as usize].clone())
        }
    }

    /// Hands a future that arrived at a non-live instance to a survivor.
    fn bounce(&mut self, mut record: FutureRecord, deps: Vec<(FutureId, Outcome)>, ctx: &mut Ctx) {
        let id = record.id;
        let dest = self
            .moved_sessions
            .get(&record.session)
            .filter(|l| ctx.env.roster.is_live(l))
            .cloned()
            .or_else(|| self.survivor(&record.target.agent_type, id.seq, ctx));
        match dest {
            Some(dest) => {
                record.executor = dest.clone();
                record.epoch += 1;
                self.log(
                    ctx,
                    EventKind::Forward,
                    Some(id),
                    format!("submit -> {dest}"),
                );
                self.forwards.insert(id, dest.clone());
                let creator = record.creator.clone();
                self.send(
                    ctx,
                    &creator,
                    Message::ExecutorChanged {
                        future: id,
                        executor: dest.clone(),
                        epoch: record.epoch,
                    },
                );
                let msg = if record.state == FutureState::Created {
                    Message::Submit {
                        record: Box::new(record),
                    }
                } else {
                    Message::Activate {
                        record: Box::new(record),
                        deps,
                    }
                };
                self.send(ctx, &dest, msg);
                for (_, m) in self.parked.remove(&id).unwrap_or_default() {
                    self.send(ctx, &dest, m);
                }
            }
            None => {
                let fail = FailureRecord::new(Some(self.loc.clone()), "no surviving instance");
                if record.state == FutureState::Created {
                    let _ = record.transition(FutureState::WaitingDeps);
                }
                record.executor = self.loc.clone();
                self.hosted.insert(
                    id,
                    Hosted {
                        record,
                        delivered: BTreeSet::new(),
                    },
                );
                self.active.insert(id);
                let _ = self.fail_future(id, fail, ctx);
                self.replay_parked(id, ctx);
            }
        }
    }

    fn on_submit(&mut self, record: FutureRecord, ctx: &mut Ctx) {
        let id = record.id;
        if self.hosted.contains_key(&id) {
            return;
        }
        let moved = self.moved_sessions.contains_key(&record.session);
        if self.status != Status::Live || moved {
            self.bounce(record, Vec::new(), ctx);
            return;
        }
        self.log(ctx, EventKind::Submit, Some(id), record.label.clone());
        self.session_creator
            .insert(record.session, record.creator.clone());
        let mut record = record;
        if let Some(p) = self.session_priority_here(record.session, &record.target.agent_type) {
            record.priority = p;
        }
        let deps: Vec<FutureId> = record.dependencies.iter().map(|d| d.future).collect();
        let producers: Vec<Location> = record
            .dependencies
            .iter()
            .map(|d| d.producer.clone())
            .collect();
        self.hosted.insert(
            id,
            Hosted {
                record,
                delivered: BTreeSet::new(),
            },
        );
        self.active.insert(id);
        for (dep, producer) in deps.iter().zip(producers) {
            self.waiters.entry(*dep).or_default().insert(id);
            if !self.received.contains_key(dep) && self.registered.insert(*dep) {
                self.send(
                    ctx,
                    &producer,
                    Message::RegisterConsumer {
                        future: *dep,
                        consumer: self.loc.clone(),
                    },
                );
            }
        }
        let _ = self.set_state(id, FutureState::WaitingDeps, ctx);
        self.check_ready(id, ctx);
        self.replay_parked(id, ctx);
    }

    fn session_priority_here(&self, session: SessionId, agent_type: &str) -> Option<i32> {
        self.session_priority
            .get(&(session, Some(agent_type.to_string())))
            .or_else(|| self.session_priority.get(&(session, None)))
            .copied()
    }

    fn replay_parked(&mut self, id: FutureId, ctx: &mut Ctx) {
        if let Some(msgs) = self.parked.remove(&id) {
            for (from, m) in msgs {
                match m {
                    Message::RegisterConsumer { future, consumer } => {
                        self.on_register(future, consumer, ctx)
                    }
                    Message::DepQuery {
                        dep,
                        waiter,
                        from: src,
                        to,
                        keep_source,
                    } => self.on_dep_query(dep, waiter, src, to, keep_source, ctx),
                    other => self.handle(from, other, ctx),
                }
            }
        }
    }

    /// WaitingDeps -> Queued once every dependency has a value; fails the
    /// future if any dependency failed.
    fn check_ready(&mut self, id: FutureId, ctx: &mut Ctx) {
        let Some(h) = self.hosted.get(&id) else {
            return;
        };
        if h.record.state != FutureState::WaitingDeps {
            return;
        }
        let mut missing = false;
        let mut failed = None;
        for d in &h.record.dependencies {
            match self.received.get(&d.future) {
                None => missing = true,
                Some(Err(f)) => {
                    failed.get_or_insert_with(|| (d.future, f.clone()));
                }
                Some(Ok(_)) => {}
            }
        }
        if let Some((dep, f)) = failed {
            let mut fail =
                FailureRecord::new(Some(self.loc.clone()), format!("dependency {dep} failed"));
            fail.diagnostics.push(f.to_string());
            fail.diagnostics.extend(f.diagnostics.iter().cloned());
            let _ = self.fail_future(id, fail, ctx);
            return;
        }
        if missing {
            return;
        }
        let _ = self.set_state(id, FutureState::Queued, ctx);
        let h = &self.hosted[&id];
        let (session, method, prio) = (
            h.record.session,
            h.record.target.method.clone(),
            h.record.priority,
        );
        if self.loc.agent_type == DRIVER_TYPE {
            return;
        }
        self.queue.push(id, session, &method, prio);
        self.log(
            ctx,
            EventKind::Enqueue,
            Some(id),
            format!("priority {prio}"),
        );
    }

    fn on_register(&mut self, future: FutureId, consumer: Location, ctx: &mut Ctx) {
        let Some(h) = self.hosted.get_mut(&future) else {
            return;
        };
        if h.record.add_consumer(consumer.clone()) {
            self.log(ctx, EventKind::Register, Some(future), consumer.to_string());
        }
        self.deliver_pending(future, ctx);
    }

    /// Pushes a terminal future's outcome to every consumer not yet served.
    fn deliver_pending(&mut self, future: FutureId, ctx: &mut Ctx) {
        let Some(h) = self.hosted.get_mut(&future) else {
            return;
        };
        let outcome = match h.record.state {
            FutureState::Resolved => Ok(h.record.value.clone().expect("resolved value")),
            FutureState::Failed => Err(h.record.failure.clone().expect("failure record")),
            _ => return,
        };
        let targets: Vec<Location> = h
            .record
            .consumers
            .iter()
            .filter(|c| !h.delivered.contains(*c))
            .cloned()
            .collect();
        for c in targets {
            self.hosted
                .get_mut(&future)
                .unwrap()
                .delivered
                .insert(c.clone());
            self.log(ctx, EventKind::Deliver, Some(future), c.to_string());
            self.send(
                ctx,
                &c,
                Message::Deliver {
                    future,
                    outcome: outcome.clone(),
                },
            );
        }
    }

    fn on_deliver(&mut self, future: FutureId, outcome: Outcome, ctx: &mut Ctx) {
        if self.received.contains_key(&future) {
            return;
        }
        self.received.insert(future, outcome);
        let waiting: Vec<FutureId> = self
            .waiters
            .get(&future)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for w in waiting {
            if self
                .hosted
                .get(&w)
                .is_some_and(|h| h.record.state == FutureState::WaitingDeps)
            {
                self.publish_summary(w, ctx.now);
                self.check_ready(w, ctx);
            }
        }
        let ready: Vec<FutureId> = self
            .migrations
            .iter()
            .filter(|(_, m)| m.awaiting.contains(&future))
            .map(|(id, _)| *id)
            .collect();
        for id in ready {
            self.try_finish_migration(id, ctx);
        }
        if let Some(mut d) = self.driver.take() {
            d.on_future_ready(future, self, ctx);
            self.driver = Some(d);
        }
    }

    fn on_dep_query(
        &mut self,
        dep: FutureId,
        waiter: FutureId,
        from: Location,
        to: Location,
        keep_source: bool,
        ctx: &mut Ctx,
    ) {
        let Some(h) = self.hosted.get_mut(&dep) else {
            return;
        };
        let in_flight = h.delivered.contains(&from);
        if in_flight {
            self.log(
                ctx,
                EventKind::MigrateStep(3),
                Some(waiter),
                format!("{dep} in flight to {from}"),
            );
        } else {
            if !keep_source {
                h.record.consumers.retain(|c| c != &from);
            }
            h.record.add_consumer(to.clone());
            self.log(
                ctx,
                EventKind::MigrateStep(3),
                Some(waiter),
                format!("{dep} retarget {from} -> {to}"),
            );
            self.deliver_pending(dep, ctx);
        }
        self.send(
            ctx,
            &from,
            Message::DepReply {
                dep,
                waiter,
                in_flight,
            },
        );
    }

    fn on_dep_reply(&mut self, dep: FutureId, waiter: FutureId, in_flight: bool, ctx: &mut Ctx) {
        let Some(m) = self.migrations.get_mut(&waiter) else {
            return;
        };
        m.pending.remove(&dep);
        if in_flight {
            m.awaiting.insert(dep);
        }
        self.try_finish_migration(waiter, ctx);
    }

    fn on_activate(
        &mut self,
        mut record: FutureRecord,
        deps: Vec<(FutureId, Outcome)>,
        ctx: &mut Ctx,
    ) {
        let id = record.id;
        if self.status != Status::Live {
            self.bounce(record, deps, ctx);
            return;
        }
        for (d, o) in deps {
            self.received.entry(d).or_insert(o);
        }
        self.moved_sessions.remove(&record.session);
        self.session_creator
            .insert(record.session, record.creator.clone());
        record.executor = self.loc.clone();
        if let Some(p) = self.session_priority_here(record.session, &record.target.agent_type) {
            record.priority = p;
        }
        let deps: Vec<FutureId> = record.dependencies.iter().map(|d| d.future).collect();
        self.hosted.insert(
            id,
            Hosted {
                record,
                delivered: BTreeSet::new(),
            },
        );
        self.active.insert(id);
        for d in &deps {
            self.waiters.entry(*d).or_default().insert(id);
        }
        self.log(ctx, EventKind::MigrateStep(6), Some(id), "activated");
        let _ = self.set_state(id, FutureState::WaitingDeps, ctx);
        self.check_ready(id, ctx);
        self.replay_parked(id, ctx);
    }

    // ---- execution ----

    /// Starts batches while execution slots are free.
    fn pump(&mut self, ctx: &mut Ctx) {
        if self.status == Status::Terminated || self.loc.agent_type == DRIVER_TYPE {
            return;
        }
        let Some(desc) = self.descriptor(ctx).cloned() else {
            return;
        };
        let stateful = desc.directives.stateful;
        let max_batch = if desc.directives.batchable {
            desc.directives.max_batch.max(1) as usize
        } else {
            1
        };
        while self.metrics.busy_slots < self.metrics.slots {
            let mut pending: BTreeMap<SessionId, Vec<FutureId>> = BTreeMap::new();
            if stateful {
                for id in &self.active {
                    let r = &self.hosted[id].record;
                    if !self.queue.is_running(*id) {
                        pending.entry(r.session).or_default().push(*id);
                    }
                }
            }
            let earlier = |s: SessionId, id: FutureId| {
                pending.get(&s).is_some_and(|v| v.iter().any(|x| *x < id))
            };
            let Some(batch) = self.queue.schedule_next(stateful, max_batch, earlier) else {
                break;
            };
            self.start_batch(batch, ctx);
        }
    }

    fn start_batch(&mut self, batch: Vec<FutureId>, ctx: &mut Ctx) {
        let profile = ctx.env.profile(&self.loc.agent_type).cloned();
        let managed = self.managed_state(ctx);
        let mut longest = SimTime(1);
        for id in &batch {
            let _ = self.set_state(*id, FutureState::Running, ctx);
            let r = &self.hosted[id].record;
            self.log(
                ctx,
                EventKind::Start,
                Some(*id),
                format!("batch {}", batch.len()),
            );
            if let Some(p) = &profile {
                let mut t = p.base_service(ctx.env.seed, r.session, &r.label);
                if let (Some(kv), true) = (p.kv, managed) {
                    let f = kv.factor(self.state.kv.residency(r.session));
                    t = SimTime(((t.0 as f64) * f).round().max(1.0) as u64);
                }
                longest = longest.max(t);
            }
        }
        let dur = match &profile {
            Some(p) => p.batch_time(longest, batch.len()),
            None => SimTime(1),
        };
        let exec = self.next_exec;
        self.next_exec += 1;
        self.metrics.busy_slots += 1;
        self.metrics.record_batch(batch.len());
        for _ in &batch {
            self.metrics.record_service(dur.as_millis_f64());
        }
        self.running.insert(exec, batch);
        ctx.execs.push((exec, dur));
    }

    /// Completion of a simulated execution started by this controller.
    pub fn on_exec_done(&mut self, exec: u64, ctx: &mut Ctx) {
        self.metrics.advance(ctx.now);
        let Some(batch) = self.running.remove(&exec) else {
            return;
        };
        self.metrics.busy_slots -= 1;
        let managed = self.managed_state(ctx);
        let kv = ctx.env.profile(&self.loc.agent_type).and_then(|p| p.kv);
        for id in batch {
            let Some(h) = self.hosted.get(&id) else {
                continue;
            };
            if h.record.state != FutureState::Running {
                continue;
            }
            let r = h.record.clone();
            let args: Vec<Payload> = r
                .args
                .iter()
                .map(|a| match a {
                    Arg::Value(p) => p.clone(),
                    Arg::Future(f) => match self.received.get(f) {
                        Some(Ok(p)) => p.clone(),
                        _ => Payload::text(""),
                    },
                })
                .collect();
            let call = CallContext {
                seed: ctx.env.seed,
                session: r.session,
                target: &r.target,
                label: &r.label,
                args: &args,
                instance: &self.loc,
            };
            let out = ctx
                .env
                .logic
                .call(&call, if managed { Some(&mut self.state) } else { None });
            if managed {
                self.mirror_state(r.session);
                if let Some(kv) = kv {
                    self.state.kv.touch(r.session, kv.entry_size, ctx.now);
                }
            }
            let res = match out {
                Ok(v) => self.resolve(id, v, ctx),
                Err(e) => self.fail_future(id, FailureRecord::new(Some(self.loc.clone()), e), ctx),
            };
            if let Err(e) = res {
                self.log(ctx, EventKind::Fail, Some(id), e.to_string());
            }
        }
        self.run_deferred(ctx);
        self.pump(ctx);
        self.maybe_terminate(ctx);
        self.sync_gauges();
    }

    fn mirror_state(&self, session: SessionId) {
        for st in self.state.states_of(session) {
            let key = format!("sessions/{session}/state/{}", st.name);
            let _ = self
                .store
                .put(&key, Payload::text(crate::canonical::to_text(st)));
        }
    }

    /// Running -> Resolved and push to consumers.
    pub fn resolve(&mut self, id: FutureId, value: Payload, ctx: &mut Ctx) -> Result<()> {
        let h = self.hosted.get_mut(&id).ok_or(Error::UnknownFuture(id))?;
        if h.record.state != FutureState::Running {
            return Err(Error::InvariantViolation(format!(
                "resolve of {id} in state {:?}",
                h.record.state
            )));
        }
        h.record.resolve(value.clone(), ctx.now)?;
        self.active.remove(&id);
        self.queue.mark_done(id);
        let queued = h
            .record
            .timestamps
            .queued
            .unwrap_or(h.record.timestamps.created);
        self.metrics
            .record_latency(ctx.now.saturating_sub(queued).as_millis_f64());
        self.log(ctx, EventKind::Resolve, Some(id), value.digest().short());
        self.publish_summary(id, ctx.now);
        self.deliver_pending(id, ctx);
        self.after_terminal(id, ctx);
        Ok(())
    }

    fn fail_future(&mut self, id: FutureId, failure: FailureRecord, ctx: &mut Ctx) -> Result<()> {
        let h = self.hosted.get_mut(&id).ok_or(Error::UnknownFuture(id))?;
        h.record.fail(failure.clone(), ctx.now)?;
        self.active.remove(&id);
        self.queue.remove(id);
        self.queue.mark_done(id);
        self.metrics.failed += 1;
        self.log(ctx, EventKind::Fail, Some(id), failure.to_string());
        self.publish_summary(id, ctx.now);
        self.deliver_pending(id, ctx);
        self.after_terminal(id, ctx);
        Ok(())
    }

    fn after_terminal(&mut self, id: FutureId, ctx: &mut Ctx) {
        if self.loc.agent_type == DRIVER_TYPE {
            if let Some(mut d) = self.driver.take() {
                d.on_future_ready(id, self, ctx);
                self.driver = Some(d);
            }
        }
    }

    // ---- commands ----

    /// Drains this instance's mailbox and applies each command.
    pub fn apply_commands(&mut self, ctx: &mut Ctx) {
        self.metrics.advance(ctx.now);
        let cmds = match self.store.drain_commands(&self.loc) {
            Ok(c) => c,
            Err(_) => return,
        };
        for cmd in cmds {
            let name = cmd.to_string();
            match self.apply(cmd, ctx) {
                Ok(true) => self.log(ctx, EventKind::CommandApplied, None, name),
                Ok(false) => {}
                Err(e) => self.log(ctx, EventKind::CommandDropped, None, format!("{name}: {e}")),
            }
        }
        self.pump(ctx);
        self.maybe_terminate(ctx);
        self.sync_gauges();
    }

    /// Applies one command; `Ok(false)` means it did not concern this
    /// instance.
    pub fn apply(&mut self, cmd: ControlCommand, ctx: &mut Ctx) -> Result<bool> {
        cmd.validate()?;
        match cmd {
            ControlCommand::Route {
                session, instance, ..
            } => {
                self.routing.pin(session, instance);
            }
            ControlCommand::RouteWeighted {
                agent_type,
                instances,
                weights,
            } => self.routing.set_weighted(&agent_type, instances, weights),
            ControlCommand::SetPriority {
                session,
                priority,
                agent_type,
            } => {
                self.session_priority
                    .insert((session, agent_type.clone()), priority);
                let ids: Vec<FutureId> = self.active.iter().copied().collect();
                for id in ids {
                    let h = self.hosted.get_mut(&id).unwrap();
                    let r = &mut h.record;
                    if r.session != session
                        || agent_type
                            .as_ref()
                            .is_some_and(|a| *a != r.target.agent_type)
                    {
                        continue;
                    }
                    if matches!(r.state, FutureState::WaitingDeps | FutureState::Queued) {
                        r.priority = priority;
                        self.queue.reprioritize(id, priority);
                        self.publish_summary(id, ctx.now);
                    }
                }
            }
            ControlCommand::Migrate {
                target,
                source,
                destination,
            } => {
                if source != self.loc {
                    return Err(Error::InvalidCommand(format!(
                        "migrate source {source} is not this instance"
                    )));
                }
                match target {
                    MigrateTarget::Future(id) => {
                        let session = match self.hosted.get(&id) {
                            Some(h) if !h.record.state.is_terminal() => h.record.session,
                            Some(_) => {
                                return Err(Error::InvalidCommand(format!(
                                    "{id} already completed"
                                )))
                            }
                            None => return Err(Error::UnknownFuture(id)),
                        };
                        if self.managed_state(ctx) {
                            self.migrate_session(session, destination, ctx)?;
                        } else {
                            self.handle_migrate(id, destination, ctx)?;
                        }
                    }
                    MigrateTarget::Session(s) => self.migrate_session(s, destination, ctx)?,
                }
            }
            ControlCommand::Kill { instance } => {
                if instance != self.loc {
                    return Ok(false);
                }
                if ctx.env.roster.is_live(&self.loc) {
                    return Err(Error::DirectiveBound(format!(
                        "kill of {instance} not admitted by lifecycle"
                    )));
                }
                self.kill(ctx);
            }
            ControlCommand::Provision { .. } => return Ok(false),
        }
        Ok(true)
    }

    fn check_migratable(&self, id: FutureId, ctx: &Ctx) -> Result<()> {
        let desc = self
            .descriptor(ctx)
            .ok_or_else(|| Error::UnknownAgent(self.loc.agent_type.clone()))?;
        let reject = |reason: &str| Error::MigrationRejected {
            future: id,
            reason: reason.to_string(),
        };
        if desc.directives.stateful {
            return Err(reject("stateful agent"));
        }
        let h = self.hosted.get(&id).ok_or(Error::UnknownFuture(id))?;
        match h.record.state {
            FutureState::WaitingDeps | FutureState::Queued => Ok(()),
            FutureState::Running if desc.directives.preemptable.is_some() => Ok(()),
            FutureState::Running => Err(reject("running and not preemptable")),
            FutureState::Migrating => Err(reject("already migrating")),
            s => Err(reject(&format!("state {s:?}"))),
        }
    }

    /// Starts the migration handshake for one future.
    pub fn handle_migrate(
        &mut self,
        id: FutureId,
        destination: Location,
        ctx: &mut Ctx,
    ) -> Result<()> {
        if let Err(e) = self.check_migratable(id, ctx) {
            self.log(ctx, EventKind::MigrateReject, Some(id), e.to_string());
            return Err(e);
        }
        if destination == self.loc || !ctx.env.roster.is_live(&destination) {
            self.log(
                ctx,
                EventKind::MigrateAbort,
                Some(id),
                format!("destination {destination} not live"),
            );
            return Ok(());
        }
        self.begin_migration(id, destination, ctx);
        Ok(())
    }

    fn begin_migration(&mut self, id: FutureId, destination: Location, ctx: &mut Ctx) {
        if self.queue.is_running(id) {
            self.preempt(id, ctx);
        }
        self.queue.remove(id);
        let _ = self.set_state(id, FutureState::Migrating, ctx);
        self.log(
            ctx,
            EventKind::MigrateStep(1),
            Some(id),
            format!("-> {destination}"),
        );
        let r = &self.hosted[&id].record;
        let missing: Vec<Dependency> = r
            .dependencies
            .iter()
            .filter(|d| !self.received.contains_key(&d.future))
            .cloned()
            .collect();
        let mut pending = BTreeSet::new();
        for d in missing {
            let keep_source = self.waiters.get(&d.future).is_some_and(|ws| {
                ws.iter().any(|w| {
                    *w != id
                        && self.hosted.get(w).is_some_and(|h| {
                            matches!(h.record.state, FutureState::WaitingDeps)
                                && !self.migrations.contains_key(w)
                        })
                })
            });
            self.log(
                ctx,
                EventKind::MigrateStep(2),
                Some(id),
                format!("query {} at {}", d.future, d.producer),
            );
            let to = self.producer_of(&d);
            self.send(
                ctx,
                &to,
                Message::DepQuery {
                    dep: d.future,
                    waiter: id,
                    from: self.loc.clone(),
                    to: destination.clone(),
                    keep_source,
                },
            );
            pending.insert(d.future);
        }
        self.migrations.insert(
            id,
            Migration {
                destination,
                pending,
                awaiting: BTreeSet::new(),
            },
        );
        self.try_finish_migration(id, ctx);
    }

    fn producer_of(&self, d: &Dependency) -> Location {
        self.forwards
            .get(&d.future)
            .cloned()
            .unwrap_or_else(|| d.producer.clone())
    }

    fn preempt(&mut self, id: FutureId, ctx: &mut Ctx) {
        let hook = self
            .descriptor(ctx)
            .and_then(|d| d.directives.preemptable.clone())
            .unwrap_or_default();
        let exec = self
            .running
            .iter()
            .find(|(_, b)| b.contains(&id))
            .map(|(e, _)| *e);
        if let Some(e) = exec {
            let b = self.running.get_mut(&e).unwrap();
            b.retain(|x| *x != id);
            if b.is_empty() {
                self.running.remove(&e);
                self.metrics.busy_slots -= 1;
            }
        }
        self.queue.mark_done(id);
        self.log(ctx, EventKind::Preempt, Some(id), hook);
    }

    fn try_finish_migration(&mut self, id: FutureId, ctx: &mut Ctx) {
        let Some(m) = self.migrations.get(&id) else {
            return;
        };
        if !m.pending.is_empty() || m.awaiting.iter().any(|d| !self.received.contains_key(d)) {
            return;
        }
        let m = self.migrations.remove(&id).unwrap();
        let mut h = self.hosted.remove(&id).expect("migrating future is hosted");
        self.active.remove(&id);
        self.store.remove(&format!("futures/{id}"));
        for d in &h.record.dependencies {
            if let Some(ws) = self.waiters.get_mut(&d.future) {
                ws.remove(&id);
            }
        }
        let dest = m.destination;
        h.record.executor = dest.clone();
        h.record.epoch += 1;
        self.log(
            ctx,
            EventKind::MigrateStep(4),
            Some(id),
            format!("creator {}", h.record.creator),
        );
        let creator = h.record.creator.clone();
        self.send(
            ctx,
            &creator,
            Message::ExecutorChanged {
                future: id,
                executor: dest.clone(),
                epoch: h.record.epoch,
            },
        );
        let has_state = self.managed_state(ctx);
        self.log(
            ctx,
            EventKind::MigrateStep(5),
            Some(id),
            if has_state {
                "session state moved"
            } else {
                "no managed state"
            },
        );
        let deps: Vec<(FutureId, Outcome)> = h
            .record
            .dependencies
            .iter()
            .filter_map(|d| self.received.get(&d.future).map(|o| (d.future, o.clone())))
            .collect();
        self.forwards.insert(id, dest.clone());
        self.send(
            ctx,
            &dest,
            Message::Activate {
                record: Box::new(h.record),
                deps,
            },
        );
    }

    /// Moves a session's futures and managed state to `destination`,
    /// deferring while a non-preemptable future of the session runs here.
    pub fn migrate_session(
        &mut self,
        session: SessionId,
        destination: Location,
        ctx: &mut Ctx,
    ) -> Result<()> {
        let desc = self
            .descriptor(ctx)
            .cloned()
            .ok_or_else(|| Error::UnknownAgent(self.loc.agent_type.clone()))?;
        let ids: Vec<FutureId> = self
            .active
            .iter()
            .copied()
            .filter(|id| self.hosted[id].record.session == session)
            .collect();
        if desc.directives.stateful {
            let e = Error::MigrationRejected {
                future: ids.first().copied().unwrap_or(FutureId::new(0, 0)),
                reason: format!("stateful agent, session {session}"),
            };
            self.log(
                ctx,
                EventKind::MigrateReject,
                ids.first().copied(),
                e.to_string(),
            );
            return Err(e);
        }
        if destination == self.loc || !ctx.env.roster.is_live(&destination) {
            self.log(
                ctx,
                EventKind::MigrateAbort,
                None,
                format!("{session}: destination {destination} not live"),
            );
            return Ok(());
        }
        if self.migrations.keys().any(|id| ids.contains(id)) {
            self.log(
                ctx,
                EventKind::MigrateAbort,
                None,
                format!("{session}: already migrating"),
            );
            return Ok(());
        }
        let blocking = desc.directives.preemptable.is_none()
            && ids.iter().any(|id| self.queue.is_running(*id));
        if blocking {
            if !self.deferred_sessions.iter().any(|(s, _)| *s == session) {
                self.log(
                    ctx,
                    EventKind::MigrateDefer,
                    None,
                    format!("{session} -> {destination}"),
                );
                self.deferred_sessions.push((session, destination));
            }
            return Ok(());
        }
        if desc.directives.managed_state {
            let bundle = self.state.extract(session, &destination);
            for st in &bundle.states {
                self.store
                    .remove(&format!("sessions/{session}/state/{}", st.name));
            }
            self.send(ctx, &destination, Message::SessionState { bundle });
        }
        if !desc.directives.pins_sessions() {
            for id in ids {
                self.begin_migration(id, destination.clone(), ctx);
            }
            return Ok(());
        }
        self.moved_sessions.insert(session, destination.clone());
        if let Some(c) = self.session_creator.get(&session).cloned() {
            self.send(
                ctx,
                &c,
                Message::SessionMoved {
                    session,
                    to: destination.clone(),
                },
            );
        }
        for id in ids {
            self.begin_migration(id, destination.clone(), ctx);
        }
        Ok(())
    }

    fn run_deferred(&mut self, ctx: &mut Ctx) {
        if self.deferred_sessions.is_empty() {
            return;
        }
        let list = std::mem::take(&mut self.deferred_sessions);
        for (i, (s, d)) in list.into_iter().enumerate() {
            let d = if self.status == Status::Draining && !ctx.env.roster.is_live(&d) {
                match self.survivor(&self.loc.agent_type.clone(), i as u64, ctx) {
                    Some(x) => x,
                    None => continue,
                }
            } else {
                d
            };
            let _ = self.migrate_session(s, d, ctx);
        }
        if self.status == Status::Draining {
            self.fail_stuck(ctx);
        }
    }

    /// While draining, fails futures that can neither move nor finish here.
    fn fail_stuck(&mut self, ctx: &mut Ctx) {
        let stuck: Vec<FutureId> = self
            .active
            .iter()
            .copied()
            .filter(|id| {
                let s = self.hosted[id].record.session;
                !self.migrations.contains_key(id)
                    && !self.queue.is_running(*id)
                    && !self.deferred_sessions.iter().any(|(d, _)| *d == s)
            })
            .collect();
        for id in stuck {
            let fail =
                FailureRecord::new(Some(self.loc.clone()), "instance killed before execution");
            let _ = self.fail_future(id, fail, ctx);
        }
    }

    /// Drain-by-migration, then terminate.
    pub fn kill(&mut self, ctx: &mut Ctx) {
        if self.status != Status::Live {
            return;
        }
        self.status = Status::Draining;
        self.log(ctx, EventKind::Kill, None, "draining");
        let managed = self.managed_state(ctx);
        let mut sessions: BTreeSet<SessionId> = self
            .active
            .iter()
            .map(|id| self.hosted[id].record.session)
            .collect();
        if managed {
            sessions.extend(
                self.session_creator
                    .keys()
                    .copied()
                    .filter(|s| self.state.has_session(*s)),
            );
        }
        for (i, s) in sessions.into_iter().enumerate() {
            let Some(dest) = self.survivor(&self.loc.agent_type.clone(), i as u64, ctx) else {
                break;
            };
            let _ = self.migrate_session(s, dest, ctx);
        }
        // Anything that could not move (stateful agent, no survivor) fails
        // unless it is already running and will finish.
        self.fail_stuck(ctx);
        self.maybe_terminate(ctx);
    }

    fn maybe_terminate(&mut self, ctx: &mut Ctx) {
        if self.status == Status::Draining && self.active.is_empty() && self.running.is_empty() {
            self.status = Status::Terminated;
            self.metrics.advance(ctx.now);
            self.metrics.ended = Some(ctx.now);
            self.log(ctx, EventKind::Terminate, None, "");
            let _ = self.store.deregister_instance(&self.loc);
            ctx.terminated = true;
        }
    }

    // ---- telemetry ----

    pub fn publish_metrics(&mut self, now: SimTime) {
        self.metrics.advance(now);
        self.sync_gauges();
        let m = &self.metrics;
        let head_elapsed = self
            .running
            .values()
            .flatten()
            .filter_map(|id| self.hosted.get(id)?.record.timestamps.started)
            .map(|s| now.saturating_sub(s).as_millis_f64())
            .fold(0.0, f64::max);
        let vals: [(&str, String); 14] = [
            ("queue_len", m.queue_len.to_string()),
            ("waiting", m.waiting.to_string()),
            ("running", m.running.to_string()),
            ("slots", m.slots.to_string()),
            ("utilization", format!("{}", m.utilization(now))),
            ("busy_ms", format!("{}", m.busy_us as f64 / 1000.0)),
            (
                "occupancy_ms",
                format!("{}", m.occupancy_us as f64 / 1000.0),
            ),
            (
                "alive_since_ms",
                format!("{}", m.alive_since.as_millis_f64()),
            ),
            ("completed", m.completed.to_string()),
            ("failed", m.failed.to_string()),
            ("mean_latency_ms", format!("{}", m.mean_latency_ms())),
            ("mean_service_ms", format!("{}", m.mean_service_ms())),
            ("head_elapsed_ms", format!("{head_elapsed}")),
            ("status", format!("{:?}", self.status).to_lowercase()),
        ];
        for (k, v) in vals {
            let _ = self
                .store
                .put(&format!("metrics/{}/{k}", self.loc), Payload::text(v));
        }
    }

    /// Kv retention hint to a managed-state instance, sent by a driver.
    pub fn send_kv_hint(&self, to: &Location, hint: KvHint, ctx: &mut Ctx) {
        self.send(ctx, to, Message::KvHint(hint));
    }
}

fn msg_name(m: &Message) -> &'static str {
    match m {
        Message::Submit { .. } => "submit",
        Message::RegisterConsumer { .. } => "register",
        Message::Deliver { .. } => "deliver",
        Message::DepQuery { .. } => "dep-query",
        Message::DepReply { .. } => "dep-reply",
        Message::ExecutorChanged { .. } => "executor-changed",
        Message::SessionMoved { .. } => "session-moved",
        Message::SessionState { .. } => "session-state",
        Message::Activate { .. } => "activate",
        Message::KvHint(_) => "kv-hint",
    }
}
