//! Periodic global controller.
//!
//! Each tick fans out a scan over every node store, assembles a
//! [`GlobalSnapshot`], runs the installed policy and pushes the resulting
//! commands into instance mailboxes. Nothing here is on a future's
//! create/route/resolve path.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::controller::DRIVER_TYPE;
use crate::error::{Error, Result};
use crate::model::{
    AgentDirectives, ControlCommand, FutureId, FutureRecord, FutureState, Location, NodeId,
    Payload, SessionId, SimTime,
};
use crate::policy::Policy;
use crate::store::NodeStore;

/// What crosses the node boundary for one outstanding future.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FutureSummary {
    pub id: FutureId,
    pub session: SessionId,
    pub state: FutureState,
    pub executor: Location,
    pub priority: i32,
    pub created: SimTime,
    pub queued: Option<SimTime>,
    pub started: Option<SimTime>,
    pub depth: u32,
    pub n_deps: u32,
    pub pending_deps: u32,
}

#[derive(Serialize, Deserialize)]
struct Wire {
    workflow: u32,
    seq: u64,
    session: u64,
    state: u8,
    agent: String,
    instance: u32,
    priority: i32,
    created: u64,
    queued: u64,
    started: u64,
    depth: u32,
    n_deps: u32,
    pending: u32,
}

const NONE: u64 = u64::MAX;

impl FutureSummary {
    pub fn of(r: &FutureRecord, pending_deps: u32, _now: SimTime) -> Self {
        FutureSummary {
            id: r.id,
            session: r.session,
            state: r.state,
            executor: r.executor.clone(),
            priority: r.priority,
            created: r.timestamps.created,
            queued: r.timestamps.queued,
            started: r.timestamps.started,
            depth: r.depth,
            n_deps: r.dependencies.len() as u32,
            pending_deps,
        }
    }

    pub fn encode(&self) -> Payload {
        let w = Wire {
            workflow: self.id.workflow.0,
            seq: self.id.seq,
            session: self.session.0,
            state: FutureState::ALL
                .iter()
                .position(|s| *s == self.state)
                .unwrap() as u8,
            agent: self.executor.agent_type.clone(),
            instance: self.executor.instance,
            priority: self.priority,
            created: self.created.0,
            queued: self.queued.map_or(NONE, |t| t.0),
            started: self.started.map_or(NONE, |t| t.0),
            depth: self.depth,
            n_deps: self.n_deps,
            pending: self.pending_deps,
        };
        Payload::new(bincode::serialize(&w).expect("plain struct"))
    }

    pub fn decode(p: &Payload) -> Result<Self> {
        let w: Wire = bincode::deserialize(p.as_bytes())
            .map_err(|e| Error::Parse(format!("future summary: {e}")))?;
        let opt = |t: u64| if t == NONE { None } else { Some(SimTime(t)) };
        Ok(FutureSummary {
            id: FutureId::new(w.workflow, w.seq),
            session: SessionId(w.session),
            state: *FutureState::ALL
                .get(w.state as usize)
                .ok_or_else(|| Error::Parse(format!("future state {}", w.state)))?,
            executor: Location {
                agent_type: w.agent,
                instance: w.instance,
            },
            priority: w.priority,
            created: SimTime(w.created),
            queued: opt(w.queued),
            started: opt(w.started),
            depth: w.depth,
            n_deps: w.n_deps,
            pending_deps: w.pending,
        })
    }

    /// Time spent waiting: since queueing if queued, else since creation.
    pub fn age(&self, now: SimTime) -> SimTime {
        now.saturating_sub(self.queued.unwrap_or(self.created))
    }
}

/// Published by drivers under `sessions/<id>/info`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session: SessionId,
    pub open_requests: u32,
    pub pins: Vec<Location>,
    pub reentries: u32,
    pub depth: u32,
    pub done: bool,
}

/// One instance's published telemetry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub location: Location,
    pub node: NodeId,
    pub queue_len: usize,
    pub waiting: usize,
    pub running: usize,
    pub slots: u32,
    pub utilization: f64,
    pub busy_ms: f64,
    pub occupancy_ms: f64,
    pub alive_since_ms: f64,
    pub completed: u64,
    pub failed: u64,
    pub mean_latency_ms: f64,
    pub mean_service_ms: f64,
    pub head_elapsed_ms: f64,
    pub live: bool,
}

impl InstanceView {
    fn set(&mut self, metric: &str, v: &str) {
        let f = || v.parse::<f64>().unwrap_or(0.0);
        match metric {
            "queue_len" => self.queue_len = f() as usize,
            "waiting" => self.waiting = f() as usize,
            "running" => self.running = f() as usize,
            "slots" => self.slots = f() as u32,
            "utilization" => self.utilization = f(),
            "busy_ms" => self.busy_ms = f(),
            "occupancy_ms" => self.occupancy_ms = f(),
            "alive_since_ms" => self.alive_since_ms = f(),
            "completed" => self.completed = f() as u64,
            "failed" => self.failed = f() as u64,
            "mean_latency_ms" => self.mean_latency_ms = f(),
            "mean_service_ms" => self.mean_service_ms = f(),
            "head_elapsed_ms" => self.head_elapsed_ms = f(),
            "status" => self.live = v == "live",
            _ => {}
        }
    }

    pub fn backlog(&self) -> usize {
        self.queue_len + self.running
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionView {
    pub info: Option<SessionInfo>,
    pub outstanding: u32,
    pub max_depth: u32,
    pub hosts: BTreeSet<Location>,
}

#[derive(Debug, Clone, Default)]
pub struct GlobalSnapshot {
    pub time: SimTime,
    pub instances: BTreeMap<Location, InstanceView>,
    /// Outstanding futures, ordered by id.
    pub futures: Vec<FutureSummary>,
    pub sessions: BTreeMap<SessionId, SessionView>,
    /// Live agent instances per type (drivers excluded).
    pub roster: BTreeMap<String, Vec<Location>>,
    pub drivers: Vec<Location>,
    /// Instances registered on each node.
    pub nodes: BTreeMap<NodeId, Vec<Location>>,
    pub directives: BTreeMap<String, AgentDirectives>,
    pub degraded: bool,
}

impl GlobalSnapshot {
    pub fn node_of(&self, loc: &Location) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|(_, v)| v.contains(loc))
            .map(|(n, _)| *n)
    }

    pub fn live(&self, agent_type: &str) -> &[Location] {
        self.roster.get(agent_type).map_or(&[], |v| v.as_slice())
    }

    pub fn futures_at<'a>(
        &'a self,
        loc: &'a Location,
    ) -> impl Iterator<Item = &'a FutureSummary> + 'a {
        self.futures.iter().filter(move |f| &f.executor == loc)
    }
}

/// Per-node scan result, the payload of one emulated RPC.
#[derive(Default)]
struct NodeScan {
    node: NodeId,
    instances: Vec<Location>,
    metrics: Vec<(String, String)>,
    futures: Vec<FutureSummary>,
    sessions: Vec<Payload>,
}

/// Reads one node. Each of the four store calls pays the emulated RPC round
/// trip `rtt`.
fn scan_node(store: &dyn NodeStore, rtt: Duration) -> NodeScan {
    let rpc = || {
        if !rtt.is_zero() {
            std::thread::sleep(rtt);
        }
    };
    rpc();
    let mut out = NodeScan {
        node: store.node(),
        instances: store.instances(),
        ..Default::default()
    };
    rpc();
    store.scan("metrics/", &mut |k, v, _| {
        out.metrics
            .push((k.to_string(), v.as_str().unwrap_or("").to_string()));
    });
    rpc();
    store.scan("futures/", &mut |_, v, _| {
        if let Ok(f) = FutureSummary::decode(v) {
            out.futures.push(f);
        }
    });
    out.futures.sort_unstable_by_key(|f| f.id);
    rpc();
    store.scan("sessions/", &mut |k, v, _| {
        if k.ends_with("/info") {
            out.sessions.push(v.clone());
        }
    });
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub collect_ms: f64,
    pub decide_ms: f64,
    pub push_ms: f64,
    pub n_futures: usize,
    pub n_instances: usize,
    pub n_commands: usize,
    pub degraded: bool,
}

impl TickReport {
    pub fn total_ms(&self) -> f64 {
        self.collect_ms + self.decide_ms + self.push_ms
    }

    pub const CSV_HEADER: &'static str =
        "tick,collect_ms,decide_ms,push_ms,n_futures,n_instances,n_commands";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{},{},{}",
            self.tick,
            self.collect_ms,
            self.decide_ms,
            self.push_ms,
            self.n_futures,
            self.n_instances,
            self.n_commands
        )
    }

    pub fn write_csv(reports: &[TickReport], w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in reports {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Result of one tick: the report, every command issued, and the subset
/// the lifecycle manager must act on.
pub struct TickOutcome {
    pub report: TickReport,
    pub commands: Vec<ControlCommand>,
    pub lifecycle: Vec<ControlCommand>,
}

pub struct GlobalController {
    stores: Vec<Arc<dyn NodeStore>>,
    policy: Box<dyn Policy>,
    directives: BTreeMap<String, AgentDirectives>,
    tick: u64,
    /// Emulated round trip of each node-store call during collection.
    pub rpc_rtt: Duration,
    /// Scan nodes from parallel threads.
    pub parallel: bool,
    /// Nodes treated as unreachable (degraded ticks).
    pub unreachable: BTreeSet<NodeId>,
    pub reports: Vec<TickReport>,
}

impl GlobalController {
    pub fn new(
        stores: Vec<Arc<dyn NodeStore>>,
        policy: Box<dyn Policy>,
        directives: BTreeMap<String, AgentDirectives>,
    ) -> Self {
        GlobalController {
            stores,
            policy,
            directives,
            tick: 0,
            rpc_rtt: Duration::ZERO,
            parallel: false,
            unreachable: BTreeSet::new(),
            reports: Vec::new(),
        }
    }

    pub fn policy_name(&self) -> String {
        self.policy.name().to_string()
    }

    pub fn add_store(&mut self, store: Arc<dyn NodeStore>) {
        self.stores.push(store);
    }

    /// Fans out a scan to every reachable node store and assembles the
    /// snapshot.
    pub fn collect(&self, now: SimTime) -> GlobalSnapshot {
        let reachable: Vec<&Arc<dyn NodeStore>> = self
            .stores
            .iter()
            .filter(|s| !self.unreachable.contains(&s.node()))
            .collect();
        let scans: Vec<NodeScan> = if self.parallel && reachable.len() > 1 {
            std::thread::scope(|sc| {
                let handles: Vec<_> = reachable
                    .iter()
                    .map(|s| {
                        let s = Arc::clone(s);
                        let rtt = self.rpc_rtt;
                        sc.spawn(move || scan_node(s.as_ref(), rtt))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scan thread"))
                    .collect()
            })
        } else {
            reachable
                .iter()
                .map(|s| scan_node(s.as_ref(), self.rpc_rtt))
                .collect()
        };
        let mut snap = GlobalSnapshot {
            time: now,
            directives: self.directives.clone(),
            degraded: reachable.len() < self.stores.len(),
            ..Default::default()
        };
        for scan in scans {
            for loc in &scan.instances {
                if loc.agent_type == DRIVER_TYPE {
                    snap.drivers.push(loc.clone());
                }
            }
            snap.nodes.insert(scan.node, scan.instances);
            for (k, v) in scan.metrics {
                let mut parts = k.splitn(3, '/');
                let (_, inst, metric) = (parts.next(), parts.next(), parts.next());
                let (Some(inst), Some(metric)) = (inst, metric) else {
                    continue;
                };
                let Ok(loc) = inst.parse::<Location>() else {
                    continue;
                };
                let view = snap
                    .instances
                    .entry(loc.clone())
                    .or_insert_with(|| InstanceView {
                        location: loc,
                        node: scan.node,
                        ..Default::default()
                    });
                view.set(metric, &v);
            }
            snap.futures.extend(scan.futures);
            for p in scan.sessions {
                if let Some(info) = p
                    .as_str()
                    .and_then(|s| crate::canonical::from_text::<SessionInfo>(s).ok())
                {
                    let s = info.session;
                    snap.sessions.entry(s).or_default().info = Some(info);
                }
            }
        }
        snap.drivers.sort();
        for (node, locs) in &snap.nodes {
            for loc in locs {
                if loc.agent_type == DRIVER_TYPE {
                    continue;
                }
                let view = snap
                    .instances
                    .entry(loc.clone())
                    .or_insert_with(|| InstanceView {
                        location: loc.clone(),
                        node: *node,
                        live: true,
                        ..Default::default()
                    });
                if view.live {
                    snap.roster
                        .entry(loc.agent_type.clone())
                        .or_default()
                        .push(loc.clone());
                }
            }
        }
        for v in snap.roster.values_mut() {
            v.sort();
        }
        snap.instances.retain(|l, _| l.agent_type != DRIVER_TYPE);
        snap.futures.sort_by_key(|f| f.id);
        for f in &snap.futures {
            let s = snap.sessions.entry(f.session).or_default();
            if !s.hosts.contains(&f.executor) {
                s.hosts.insert(f.executor.clone());
            }
            if f.executor.agent_type != DRIVER_TYPE {
                s.outstanding += 1;
                s.max_depth = s.max_depth.max(f.depth);
            }
        }
        snap
    }

    /// Instances whose mailbox receives `cmd`.
    pub fn targets(cmd: &ControlCommand, snap: &GlobalSnapshot) -> Vec<Location> {
        match cmd {
            ControlCommand::Route { .. } | ControlCommand::RouteWeighted { .. } => {
                snap.drivers.clone()
            }
            ControlCommand::SetPriority { session, .. } => snap
                .sessions
                .get(session)
                .map(|s| s.hosts.iter().cloned().collect())
                .unwrap_or_default(),
            ControlCommand::Migrate { source, .. } => vec![source.clone()],
            ControlCommand::Kill { instance } => vec![instance.clone()],
            ControlCommand::Provision { .. } => Vec::new(),
        }
    }

    /// Validates `cmd` and pushes it to each target mailbox. Returns the
    /// number of mailbox entries written.
    pub fn issue(&self, cmd: &ControlCommand, snap: &GlobalSnapshot) -> Result<usize> {
        cmd.validate()?;
        let mut n = 0;
        for t in Self::targets(cmd, snap) {
            let Some(node) = snap.node_of(&t) else {
                continue;
            };
            let Some(store) = self.stores.iter().find(|s| s.node() == node) else {
                continue;
            };
            if store.push_command(&t, cmd.clone()).is_ok() {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn tick(&mut self, now: SimTime) -> TickOutcome {
        let t0 = Instant::now();
        let snap = self.collect(now);
        let t1 = Instant::now();
        let commands = self.policy.decide(&snap);
        let t2 = Instant::now();
        let mut lifecycle = Vec::new();
        let mut issued = Vec::new();
        for c in commands {
            if self.issue(&c, &snap).is_err() {
                continue;
            }
            if matches!(
                c,
                ControlCommand::Kill { .. } | ControlCommand::Provision { .. }
            ) {
                lifecycle.push(c.clone());
            }
            issued.push(c);
        }
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1000.0;
        let report = TickReport {
            tick: self.tick,
            collect_ms: ms(t0, t1),
            decide_ms: ms(t1, t2),
            push_ms: ms(t2, t3),
            n_futures: snap.futures.len(),
            n_instances: snap.instances.len(),
            n_commands: issued.len(),
            degraded: snap.degraded,
        };
        self.tick += 1;
        self.reports.push(report.clone());
        TickOutcome {
            report,
            commands: issued,
            lifecycle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::NullPolicy;
    use crate::store::MemStore;

    fn summary(seq: u64, loc: &Location, session: u64) -> FutureSummary {
        FutureSummary {
            id: FutureId::new(0, seq),
            session: SessionId(session),
            state: FutureState::Queued,
            executor: loc.clone(),
            priority: 0,
            created: SimTime(5),
            queued: Some(SimTime(7)),
            started: None,
            depth: 2,
            n_deps: 1,
            pending_deps: 0,
        }
    }

    #[test]
    fn summary_round_trip() {
        let s = summary(3, &Location::new("a", 1), 9);
        assert_eq!(FutureSummary::decode(&s.encode()).unwrap(), s);
    }

    #[test]
    fn empty_tick_with_null_policy() {
        let store: Arc<dyn NodeStore> = Arc::new(MemStore::new(0));
        let mut gc = GlobalController::new(vec![store], Box::new(NullPolicy), BTreeMap::new());
        let out = gc.tick(SimTime::ZERO);
        assert_eq!(out.report.n_commands, 0);
        assert_eq!(out.report.n_futures, 0);
        assert!(
            out.report.collect_ms >= 0.0
                && out.report.decide_ms >= 0.0
                && out.report.push_ms >= 0.0
        );
    }

    #[test]
    fn commands_reach_the_right_node() {
        let n0 = Arc::new(MemStore::new(0));
        let n1 = Arc::new(MemStore::new(1));
        let a0 = Location::new("a", 0);
        let a1 = Location::new("a", 1);
        n0.register_instance(a0.clone());
        n1.register_instance(a1.clone());
        let stores: Vec<Arc<dyn NodeStore>> = vec![n0.clone(), n1.clone()];
        let gc = GlobalController::new(stores, Box::new(NullPolicy), BTreeMap::new());
        n1.put("futures/0.1", summary(1, &a1, 4).encode()).unwrap();
        let snap = gc.collect(SimTime(10));
        let cmd = ControlCommand::Migrate {
            target: crate::model::MigrateTarget::Future(FutureId::new(0, 1)),
            source: a1.clone(),
            destination: a0.clone(),
        };
        assert_eq!(gc.issue(&cmd, &snap).unwrap(), 1);
        assert!(n0.drain_commands(&a0).unwrap().is_empty());
        assert_eq!(n1.drain_commands(&a1).unwrap(), vec![cmd]);
        let prio = ControlCommand::SetPriority {
            session: SessionId(4),
            priority: 9,
            agent_type: None,
        };
        assert_eq!(gc.issue(&prio, &snap).unwrap(), 1);
        assert_eq!(n1.drain_commands(&a1).unwrap(), vec![prio]);
    }

    #[test]
    fn invalid_command_is_rejected_before_push() {
        let n0 = Arc::new(MemStore::new(0));
        let a0 = Location::new("a", 0);
        n0.register_instance(a0.clone());
        let gc = GlobalController::new(vec![n0.clone()], Box::new(NullPolicy), BTreeMap::new());
        let snap = gc.collect(SimTime::ZERO);
        let cmd = ControlCommand::Migrate {
            target: crate::model::MigrateTarget::Session(SessionId(1)),
            source: a0.clone(),
            destination: a0.clone(),
        };
        assert!(gc.issue(&cmd, &snap).is_err());
        assert!(n0.drain_commands(&a0).unwrap().is_empty());
    }

    #[test]
    fn unreachable_node_degrades_tick() {
        let stores: Vec<Arc<dyn NodeStore>> =
            vec![Arc::new(MemStore::new(0)), Arc::new(MemStore::new(1))];
        let mut gc = GlobalController::new(stores, Box::new(NullPolicy), BTreeMap::new());
        gc.unreachable.insert(1);
        assert!(gc.tick(SimTime::ZERO).report.degraded);
    }
}
