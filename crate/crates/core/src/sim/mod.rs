//! Deterministic discrete-event simulator.
//!
//! One event loop drives every controller. Events fire in `(time, seq)`
//! order; messages between controllers take the link delay plus optional
//! jitter and are delivered FIFO per ordered pair of instances.

pub mod bench;
pub mod metrics;
pub mod profile;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::controller::{
    ComponentController, Ctx, Env, Message, Outcome, Roster, Status, Timer, DRIVER_TYPE,
};
use crate::error::{Error, Result};
use crate::eventlog::{EventKind, EventLog};
use crate::global::{GlobalController, GlobalSnapshot, TickReport};
use crate::model::{
    Arg, ContentDigest, ControlCommand, FutureId, FutureIdAllocator, FutureState, Location,
    MigrateTarget, NodeId, Payload, SessionId, SimTime, Target,
};
use crate::policy::PolicyRegistry;
use crate::store::{MemStore, NodeStore};
use crate::workflow::driver::{DriverState, SessionPlan};
use crate::workflow::program::WorkflowProgram;
use crate::workflow::scenario::{ArrivalProcess, ClockMode, Scenario};
use crate::workflow::{FutureHandle, ValueResult};

pub use metrics::{InstanceStats, LatencyStats, RequestLatency, RunMetrics, TimelinePoint};

/// Random migration injection used by the transparency oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MigrationFuzz {
    pub seed: u64,
    /// Commands injected per tick, at most.
    pub per_tick: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub fuzz: Option<MigrationFuzz>,
    /// Run the global controller at all. With `false` the fleet runs on
    /// static routing only.
    pub no_global: bool,
}

#[derive(Debug, Clone)]
enum Event {
    Deliver {
        from: Location,
        to: Location,
        msg: Message,
    },
    ExecDone {
        at: Location,
        exec: u64,
    },
    Timer {
        at: Location,
        timer: Timer,
    },
    Arrival {
        session: SessionId,
    },
    Tick,
    Wake {
        at: Location,
    },
}

fn lifecycle_loc() -> Location {
    Location::new("lifecycle", 0)
}

fn keyed_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    let key = format!("{seed}/{purpose}");
    ChaCha8Rng::seed_from_u64(ContentDigest::of(key.as_bytes()).prefix_u64())
}

/// Poisson arrival times in milliseconds for `n` sessions at `rate_per_s`.
pub fn poisson_arrivals(seed: u64, rate_per_s: f64, n: usize) -> Vec<f64> {
    let mut rng = keyed_rng(seed, "arrivals");
    let exp = Exp::new(rate_per_s / 1000.0).expect("positive rate");
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect()
}

pub struct Runtime {
    scenario: Scenario,
    program: Arc<WorkflowProgram>,
    options: RunOptions,
    env: Env,
    stores: BTreeMap<NodeId, Arc<MemStore>>,
    ctls: BTreeMap<Location, ComponentController>,
    node_of: BTreeMap<Location, NodeId>,
    drivers: Vec<Location>,
    events: BTreeMap<(SimTime, u64), Event>,
    seq: u64,
    pending_work: usize,
    now: SimTime,
    log: EventLog,
    ids: FutureIdAllocator,
    last_link: BTreeMap<(Location, Location), SimTime>,
    jitter: ChaCha8Rng,
    fuzz_rng: Option<ChaCha8Rng>,
    gc: Option<GlobalController>,
    next_instance: BTreeMap<String, u32>,
    ticking: bool,
    arrivals_left: usize,
    ticks: u64,
    provisions: u64,
    kills: u64,
    lifecycle_rejects: u64,
    commands: BTreeMap<String, u64>,
    timeline: Vec<TimelinePoint>,
    violations: Vec<String>,
    wall_start: Option<Instant>,
    next_api_session: u64,
}

impl Runtime {
    pub fn new(scenario: Scenario) -> Result<Runtime> {
        Self::with_options(scenario, RunOptions::default())
    }

    pub fn with_options(scenario: Scenario, options: RunOptions) -> Result<Runtime> {
        scenario.validate()?;
        let policy = PolicyRegistry::default().build(&scenario.policy.spec())?;
        let descriptors: BTreeMap<_, _> = scenario
            .fleet
            .descriptors()
            .into_iter()
            .map(|(k, d)| (k, Arc::new(d)))
            .collect();
        let directives = descriptors
            .iter()
            .map(|(k, d)| (k.clone(), d.directives.clone()))
            .collect();
        let placement = scenario.fleet.placement();
        let mut roster = Roster::default();
        for (t, i, _) in &placement {
            if t != DRIVER_TYPE {
                roster.add(Location::new(t.clone(), *i));
            }
        }
        let env = Env {
            seed: scenario.seed,
            descriptors,
            profiles: scenario.fleet.profiles.clone(),
            logic: Box::new(scenario.workflow.logic.clone()),
            roster,
            kv_hints: scenario.workflow.kv_hints,
        };
        let stores: BTreeMap<NodeId, Arc<MemStore>> = (0..scenario.fleet.nodes)
            .map(|n| (n, Arc::new(MemStore::new(n))))
            .collect();
        let mut ctls = BTreeMap::new();
        let mut node_of = BTreeMap::new();
        let mut drivers = Vec::new();
        let mut next_instance = BTreeMap::new();
        for (t, i, node) in placement {
            let loc = Location::new(t.clone(), i);
            let store: Arc<dyn NodeStore> = stores[&node].clone();
            let mut ctl = ComponentController::new(loc.clone(), store, &env, SimTime::ZERO);
            if t == DRIVER_TYPE {
                ctl.driver = Some(DriverState::new(scenario.seed, scenario.workflow.kv_hints));
                drivers.push(loc.clone());
            }
            *next_instance.entry(t).or_insert(0) = i + 1;
            node_of.insert(loc.clone(), node);
            ctls.insert(loc, ctl);
        }
        let gc = (!options.no_global).then(|| {
            let s: Vec<Arc<dyn NodeStore>> = stores
                .values()
                .map(|s| s.clone() as Arc<dyn NodeStore>)
                .collect();
            GlobalController::new(s, policy, directives)
        });
        let fuzz_rng = options.fuzz.map(|f| keyed_rng(f.seed, "fuzz"));
        let mut rt = Runtime {
            program: Arc::new(scenario.workflow.program()),
            jitter: keyed_rng(scenario.seed, "jitter"),
            options,
            env,
            stores,
            ctls,
            node_of,
            drivers,
            events: BTreeMap::new(),
            seq: 0,
            pending_work: 0,
            now: SimTime::ZERO,
            log: EventLog::new(),
            ids: FutureIdAllocator::new(),
            last_link: BTreeMap::new(),
            fuzz_rng,
            gc,
            next_instance,
            ticking: false,
            arrivals_left: 0,
            ticks: 0,
            provisions: 0,
            kills: 0,
            lifecycle_rejects: 0,
            commands: BTreeMap::new(),
            timeline: Vec::new(),
            violations: Vec::new(),
            wall_start: None,
            next_api_session: 1 << 32,
            scenario,
        };
        rt.start_ticks();
        Ok(rt)
    }

    /// Schedules the scenario's session arrivals.
    pub fn schedule_arrivals(&mut self) {
        let n = self.scenario.arrivals.sessions as usize;
        let times = match self.scenario.arrivals.process {
            ArrivalProcess::Poisson { rate_per_s } => {
                poisson_arrivals(self.scenario.seed, rate_per_s, n)
            }
            ArrivalProcess::Batch => vec![0.0; n],
        };
        self.arrivals_left += n;
        for (i, t) in times.into_iter().enumerate() {
            self.push(
                SimTime::from_millis_f64(t),
                Event::Arrival {
                    session: SessionId(i as u64),
                },
            );
        }
    }

    fn start_ticks(&mut self) {
        if !self.ticking {
            self.ticking = true;
            let at = self.now + SimTime::from_millis_f64(self.scenario.policy.tick_ms);
            self.push(at, Event::Tick);
        }
    }

    fn push(&mut self, at: SimTime, ev: Event) {
        if !matches!(ev, Event::Tick | Event::Wake { .. }) {
            self.pending_work += 1;
        }
        self.events.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn link_time(&mut self, from: &Location, to: &Location) -> SimTime {
        let c = &self.scenario.clock;
        let mut d = c.link_delay_ms;
        if c.jitter_ms > 0.0 {
            d += self.jitter.random_range(0.0..=c.jitter_ms);
        }
        let key = (from.clone(), to.clone());
        let at = (self.now + SimTime::from_millis_f64(d))
            .max(self.last_link.get(&key).copied().unwrap_or_default());
        self.last_link.insert(key, at);
        at
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn controllers(&self) -> impl Iterator<Item = &ComponentController> {
        self.ctls.values()
    }

    pub fn controller(&self, loc: &Location) -> Option<&ComponentController> {
        self.ctls.get(loc)
    }

    pub fn drivers(&self) -> &[Location] {
        &self.drivers
    }

    pub fn store(&self, node: NodeId) -> Option<&Arc<MemStore>> {
        self.stores.get(&node)
    }

    pub fn roster(&self) -> &Roster {
        &self.env.roster
    }

    pub fn tick_reports(&self) -> &[TickReport] {
        self.gc.as_ref().map_or(&[], |g| g.reports.as_slice())
    }

    /// A snapshot as the global controller would assemble it now.
    pub fn snapshot(&mut self) -> GlobalSnapshot {
        self.publish_all();
        match &self.gc {
            Some(g) => g.collect(self.now),
            None => GlobalSnapshot::default(),
        }
    }

    fn publish_all(&mut self) {
        for (loc, c) in self.ctls.iter_mut() {
            if loc.agent_type != DRIVER_TYPE && c.status != Status::Terminated {
                c.publish_metrics(self.now);
            }
        }
    }

    /// Runs `f` on the controller at `loc` and schedules its side effects.
    fn act<R>(
        &mut self,
        loc: &Location,
        f: impl FnOnce(&mut ComponentController, &mut Ctx) -> R,
    ) -> R {
        let ctl = self.ctls.get_mut(loc).expect("controller exists");
        let mut ctx = Ctx::new(self.now, &self.env, &mut self.log, &mut self.ids);
        let r = f(ctl, &mut ctx);
        let Ctx {
            out,
            execs,
            timers,
            terminated,
            ..
        } = ctx;
        for (to, msg) in out {
            let at = self.link_time(loc, &to);
            self.push(
                at,
                Event::Deliver {
                    from: loc.clone(),
                    to,
                    msg,
                },
            );
        }
        for (exec, dur) in execs {
            self.push(
                self.now + dur,
                Event::ExecDone {
                    at: loc.clone(),
                    exec,
                },
            );
        }
        for (delay, timer) in timers {
            self.push(
                self.now + delay,
                Event::Timer {
                    at: loc.clone(),
                    timer,
                },
            );
        }
        if terminated {
            self.env.roster.remove(loc);
        }
        r
    }

    fn with_driver<R>(
        ctl: &mut ComponentController,
        ctx: &mut Ctx,
        f: impl FnOnce(&mut DriverState, &mut ComponentController, &mut Ctx) -> R,
    ) -> R {
        let mut d = ctl.driver.take().expect("driver state");
        let r = f(&mut d, ctl, ctx);
        ctl.driver = Some(d);
        r
    }

    /// Processes the next event. Returns false when nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(((t, _), ev)) = self.events.pop_first() else {
            return false;
        };
        if !matches!(ev, Event::Tick | Event::Wake { .. }) {
            self.pending_work -= 1;
        }
        self.now = t;
        if self.scenario.clock.mode == ClockMode::Wall {
            self.pace();
        }
        self.dispatch(ev);
        true
    }

    fn pace(&mut self) {
        let start = *self.wall_start.get_or_insert_with(Instant::now);
        let target = self.now.as_millis_f64() * self.scenario.clock.time_scale / 1000.0;
        let elapsed = start.elapsed().as_secs_f64();
        if target > elapsed {
            std::thread::sleep(std::time::Duration::from_secs_f64(target - elapsed));
        }
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Deliver { from, to, msg } => {
                if !self.ctls.contains_key(&to) {
                    self.violations
                        .push(format!("message to unknown instance {to}"));
                    return;
                }
                self.act(&to, |c, ctx| c.handle(from, msg, ctx));
            }
            Event::ExecDone { at, exec } => self.act(&at, |c, ctx| c.on_exec_done(exec, ctx)),
            Event::Timer { at, timer } => self.act(&at, |c, ctx| {
                Self::with_driver(c, ctx, |d, c, ctx| d.on_timer(timer, c, ctx))
            }),
            Event::Arrival { session } => {
                self.arrivals_left -= 1;
                let driver = self.drivers[(session.0 % self.drivers.len() as u64) as usize].clone();
                let program = self.program.clone();
                let plan = self.scenario.arrivals.session.clone();
                self.act(&driver, |c, ctx| {
                    Self::with_driver(c, ctx, |d, c, ctx| {
                        d.open_session(session, program, plan, None, c, ctx)
                    })
                });
            }
            Event::Wake { at } => {
                if self.ctls[&at].status != Status::Terminated {
                    self.act(&at, |c, ctx| c.apply_commands(ctx));
                }
            }
            Event::Tick => self.tick(),
        }
    }

    fn tick(&mut self) {
        self.ticking = false;
        self.ticks += 1;
        self.publish_all();
        for (loc, c) in &self.ctls {
            if loc.agent_type != DRIVER_TYPE && c.status == Status::Live {
                self.timeline.push(TimelinePoint {
                    time_ms: self.now.as_millis_f64(),
                    location: loc.clone(),
                    queue_len: c.queue.len(),
                    running: c.queue.running_len(),
                });
            }
        }
        let mut issued = 0;
        if let Some(gc) = self.gc.as_mut() {
            let out = gc.tick(self.now);
            for c in &out.commands {
                *self.commands.entry(c.name().to_string()).or_default() += 1;
            }
            issued += out.commands.len();
            for c in out.lifecycle {
                self.lifecycle(c);
            }
        }
        issued += self.fuzz();
        if issued > 0 {
            let live: Vec<Location> = self
                .ctls
                .iter()
                .filter(|(_, c)| c.status != Status::Terminated)
                .map(|(l, _)| l.clone())
                .collect();
            let at = self.now + SimTime::from_millis_f64(self.scenario.clock.link_delay_ms);
            for l in live {
                self.push(at, Event::Wake { at: l });
            }
        }
        if self.pending_work > 0 || self.arrivals_left > 0 {
            self.start_ticks();
        }
    }

    /// Instance lifecycle manager: admits Provision and Kill within the
    /// directive bounds.
    fn lifecycle(&mut self, cmd: ControlCommand) {
        let lc = lifecycle_loc();
        match cmd {
            ControlCommand::Provision { agent_type, node } => {
                let Ok(desc) = self.env.descriptor(&agent_type).cloned() else {
                    return self.reject(format!("provision {agent_type}: unknown agent"));
                };
                let live = self.env.roster.live(&agent_type).len() as u32;
                if live >= desc.directives.max_instances {
                    return self.reject(format!(
                        "provision {agent_type}: {}",
                        Error::DirectiveBound(format!(
                            "max_instances {}",
                            desc.directives.max_instances
                        ))
                    ));
                }
                let Some(store) = self.stores.get(&node).cloned() else {
                    return self.reject(format!("provision {agent_type}: unknown node {node}"));
                };
                let n = self.next_instance.entry(agent_type.clone()).or_insert(0);
                let loc = Location::new(agent_type, *n);
                *n += 1;
                let mut ctl = ComponentController::new(loc.clone(), store, &self.env, self.now);
                ctl.publish_metrics(self.now);
                self.ctls.insert(loc.clone(), ctl);
                self.node_of.insert(loc.clone(), node);
                self.env.roster.add(loc.clone());
                self.provisions += 1;
                self.log.push(
                    self.now,
                    &lc,
                    EventKind::Provision,
                    None,
                    format!("{loc} on node {node}"),
                );
            }
            ControlCommand::Kill { instance } => {
                let Ok(desc) = self.env.descriptor(&instance.agent_type).cloned() else {
                    return self.reject(format!("kill {instance}: unknown agent"));
                };
                let live = self.env.roster.live(&instance.agent_type).len() as u32;
                if !self.env.roster.is_live(&instance) {
                    return self.reject(format!("kill {instance}: not live"));
                }
                if live <= desc.directives.min_instances {
                    return self.reject(format!(
                        "kill {instance}: {}",
                        Error::DirectiveBound(format!(
                            "min_instances {}",
                            desc.directives.min_instances
                        ))
                    ));
                }
                self.env.roster.remove(&instance);
                self.kills += 1;
                self.log
                    .push(self.now, &lc, EventKind::Kill, None, instance.to_string());
            }
            _ => {}
        }
    }

    fn reject(&mut self, why: String) {
        self.lifecycle_rejects += 1;
        self.log.push(
            self.now,
            &lifecycle_loc(),
            EventKind::CommandDropped,
            None,
            why,
        );
    }

    /// Provision or kill through the lifecycle manager directly.
    pub fn apply_lifecycle(&mut self, cmd: ControlCommand) -> Result<()> {
        cmd.validate()?;
        let before = self.lifecycle_rejects;
        let kill = match &cmd {
            ControlCommand::Kill { instance } => Some(instance.clone()),
            ControlCommand::Provision { .. } => None,
            _ => {
                return Err(Error::InvalidCommand(format!(
                    "{} is not a lifecycle command",
                    cmd.name()
                )))
            }
        };
        self.lifecycle(cmd.clone());
        if self.lifecycle_rejects > before {
            let why = self
                .log
                .records()
                .last()
                .map(|r| r.detail.clone())
                .unwrap_or_default();
            return Err(Error::DirectiveBound(why));
        }
        if let Some(inst) = kill {
            self.inject(&inst, cmd)?;
        }
        Ok(())
    }

    /// Pushes a command straight into `target`'s mailbox and wakes it.
    pub fn inject(&mut self, target: &Location, cmd: ControlCommand) -> Result<()> {
        cmd.validate()?;
        let node = *self
            .node_of
            .get(target)
            .ok_or_else(|| Error::UnknownInstance(target.clone()))?;
        self.stores[&node].push_command(target, cmd)?;
        let at = self.now + SimTime::from_millis_f64(self.scenario.clock.link_delay_ms);
        self.push(at, Event::Wake { at: target.clone() });
        self.start_ticks();
        Ok(())
    }

    fn fuzz(&mut self) -> usize {
        let (Some(f), Some(mut rng)) = (self.options.fuzz, self.fuzz_rng.take()) else {
            return 0;
        };
        let mut eligible: Vec<(Location, FutureId)> = Vec::new();
        for (loc, c) in &self.ctls {
            if loc.agent_type == DRIVER_TYPE || c.status != Status::Live {
                continue;
            }
            let stateful = self
                .env
                .descriptors
                .get(&loc.agent_type)
                .is_some_and(|d| d.directives.stateful);
            if stateful || self.env.roster.live(&loc.agent_type).len() < 2 {
                continue;
            }
            for r in c.records() {
                if matches!(r.state, FutureState::WaitingDeps | FutureState::Queued) {
                    eligible.push((loc.clone(), r.id));
                }
            }
        }
        let mut n = 0;
        for _ in 0..f.per_tick {
            if eligible.is_empty() {
                break;
            }
            let (src, id) = eligible.swap_remove(rng.random_range(0..eligible.len()));
            let peers: Vec<Location> = self
                .env
                .roster
                .live(&src.agent_type)
                .iter()
                .filter(|l| **l != src)
                .cloned()
                .collect();
            let dest = peers[rng.random_range(0..peers.len())].clone();
            let cmd = ControlCommand::Migrate {
                target: MigrateTarget::Future(id),
                source: src.clone(),
                destination: dest,
            };
            let node = self.node_of[&src];
            if self.stores[&node].push_command(&src, cmd).is_ok() {
                *self.commands.entry("migrate(injected)".into()).or_default() += 1;
                n += 1;
            }
        }
        self.fuzz_rng = Some(rng);
        n
    }

    /// Runs until no work is left or the horizon passes.
    pub fn run_to_end(&mut self) {
        let horizon = self.scenario.clock.horizon_ms.map(SimTime::from_millis_f64);
        while let Some((&(t, _), _)) = self.events.first_key_value() {
            if horizon.is_some_and(|h| t > h) {
                break;
            }
            self.step();
        }
    }

    /// Runs events up to and including time `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some((&(at, _), _)) = self.events.first_key_value() {
            if at > t {
                break;
            }
            self.step();
        }
        self.now = self.now.max(t);
    }

    // ---- futures API ----

    fn api_driver(&self) -> Location {
        self.drivers[0].clone()
    }

    /// A session id outside the range used by scenario arrivals.
    pub fn new_session(&mut self) -> SessionId {
        let s = SessionId(self.next_api_session);
        self.next_api_session += 1;
        s
    }

    /// Creates a future from the driver. Never blocks.
    pub fn invoke(
        &mut self,
        session: SessionId,
        agent: &str,
        method: &str,
        args: Vec<Arg>,
        label: &str,
    ) -> Result<FutureHandle> {
        let home = self.api_driver();
        let target = Target::new(agent, method);
        let label = label.to_string();
        let id = self.act(&home, |c, ctx| {
            c.create_future(session, target, args, label, ctx)
        })?;
        self.start_ticks();
        Ok(FutureHandle { id, session, home })
    }

    /// True once the future is Resolved or Failed. Never blocks.
    pub fn available(&self, h: &FutureHandle) -> bool {
        self.outcome(h).is_some()
    }

    fn outcome(&self, h: &FutureHandle) -> Option<Outcome> {
        let home = &self.ctls[&h.home];
        if let Some(o) = home.received(h.id) {
            return Some(o.clone());
        }
        let mut at = home
            .executor_of(h.id)
            .cloned()
            .unwrap_or_else(|| h.home.clone());
        for _ in 0..self.ctls.len() + 1 {
            let c = &self.ctls[&at];
            if let Some(r) = c.record(h.id) {
                return match r.state {
                    FutureState::Resolved => r.value.clone().map(Ok),
                    FutureState::Failed => r.failure.clone().map(Err),
                    _ => None,
                };
            }
            at = c.forwarded_to(h.id)?.clone();
        }
        None
    }

    /// Waits up to `timeout` of virtual time for the future's outcome. The
    /// first call registers the driver as a consumer.
    pub fn value(&mut self, h: &FutureHandle, timeout: SimTime) -> ValueResult {
        let id = h.id;
        let home = h.home.clone();
        let polled = self.act(&home, |c, ctx| c.poll(id, ctx));
        let deadline = self.now + timeout;
        let mut got = polled.or_else(|| self.ctls[&home].received(id).cloned());
        while got.is_none() {
            match self.events.first_key_value() {
                Some((&(t, _), _)) if t <= deadline => {
                    self.step();
                    got = self.ctls[&home].received(id).cloned().or_else(|| {
                        let r = self.ctls[&home].record(id)?;
                        match r.state {
                            FutureState::Resolved => r.value.clone().map(Ok),
                            FutureState::Failed => r.failure.clone().map(Err),
                            _ => None,
                        }
                    });
                }
                _ => break,
            }
        }
        match got {
            Some(Ok(v)) => ValueResult::Value(v),
            Some(Err(f)) => ValueResult::Failure(f),
            None => {
                self.now = self.now.max(deadline);
                ValueResult::Timeout
            }
        }
    }

    /// Starts one request of `program` for `session`; returns the handle of
    /// its result future.
    pub fn run_workflow(
        &mut self,
        program: Arc<WorkflowProgram>,
        session: SessionId,
        input: Option<Payload>,
    ) -> Result<FutureHandle> {
        program.validate()?;
        let home = self.api_driver();
        let plan = SessionPlan::default();
        let id = self.act(&home, |c, ctx| {
            Self::with_driver(c, ctx, |d, c, ctx| {
                d.open_session(session, program, plan, input, c, ctx)
            })
        });
        self.start_ticks();
        Ok(FutureHandle { id, session, home })
    }

    // ---- results ----

    /// Runs the scenario's arrivals to completion and reports.
    pub fn run(mut self) -> (RunMetrics, EventLog) {
        self.schedule_arrivals();
        self.run_to_end();
        self.finish()
    }

    pub fn finish(mut self) -> (RunMetrics, EventLog) {
        self.publish_all();
        let mut series = Vec::new();
        let mut open = 0;
        let mut reentries = 0u64;
        for d in &self.drivers {
            let ds = self.ctls[d].driver.as_ref().expect("driver");
            open += ds.open_requests() as u64;
            for c in &ds.completions {
                series.push(RequestLatency {
                    session: c.session,
                    request: c.request,
                    start_ms: c.start.as_millis_f64(),
                    end_ms: c.end.as_millis_f64(),
                    ok: c.ok,
                    digest: c.digest.clone(),
                });
            }
            reentries += ds.total_reentries();
        }
        series.sort_by_key(|r| (r.session, r.request));
        let requests = self.log.of_kind(EventKind::Request).count() as u64;
        let completed = series.iter().filter(|r| r.ok).count() as u64;
        let failed = series.len() as u64 - completed;
        self.check_invariants(requests, completed, failed, open);

        let now = self.now;
        let mut instances = Vec::new();
        for (loc, c) in &self.ctls {
            if loc.agent_type == DRIVER_TYPE {
                continue;
            }
            let m = &c.metrics;
            let alive = m
                .ended
                .unwrap_or(now)
                .saturating_sub(m.alive_since)
                .as_millis_f64();
            let busy = m.busy_us as f64 / 1000.0;
            instances.push(InstanceStats {
                location: loc.clone(),
                node: self.node_of[loc],
                live_at_end: c.status == Status::Live,
                alive_ms: alive,
                busy_ms: busy,
                utilization: if alive > 0.0 {
                    busy / (alive * m.slots as f64)
                } else {
                    0.0
                },
                completed: m.completed,
                failed: m.failed,
                mean_batch: if m.batches > 0 {
                    m.batched_futures as f64 / m.batches as f64
                } else {
                    0.0
                },
            });
        }
        let utils: Vec<f64> = instances
            .iter()
            .filter(|i| i.live_at_end)
            .map(|i| i.utilization)
            .collect();
        let lat: Vec<f64> = series
            .iter()
            .filter(|r| r.ok)
            .map(|r| r.latency_ms())
            .collect();
        let first = series
            .iter()
            .map(|r| r.start_ms)
            .fold(f64::INFINITY, f64::min);
        let last = series.iter().map(|r| r.end_ms).fold(0.0, f64::max);
        let metrics = RunMetrics {
            schema: metrics::SCHEMA_VERSION,
            scenario: self.scenario.workflow.name.clone(),
            policy: self.scenario.policy.names.join("+"),
            seed: self.scenario.seed,
            requests,
            completed,
            failed,
            in_flight: open,
            latency: LatencyStats::of(&lat),
            makespan_ms: if series.is_empty() {
                0.0
            } else {
                last - first.min(last)
            },
            end_ms: now.as_millis_f64(),
            imbalance_index: metrics::imbalance_index(&utils),
            migrations: self.log.of_kind(EventKind::MigrateStep(6)).count() as u64,
            migration_rejects: self.log.of_kind(EventKind::MigrateReject).count() as u64,
            session_reentries: reentries,
            commands: self.commands.clone(),
            provisions: self.provisions,
            kills: self.kills,
            lifecycle_rejects: self.lifecycle_rejects,
            ticks: self.ticks,
            events: self.log.len(),
            instances,
            violations: self.violations.clone(),
            series,
            timeline: std::mem::take(&mut self.timeline),
        };
        (metrics, self.log)
    }

    fn check_invariants(&mut self, requests: u64, completed: u64, failed: u64, open: u64) {
        if requests != completed + failed + open {
            self.violations.push(format!(
                "conservation: {requests} requests != {completed} resolved + {failed} failed + {open} in flight"
            ));
        }
        if self.scenario.clock.horizon_ms.is_none() && open > 0 {
            self.violations
                .push(format!("stalled with {open} open requests"));
        }
        let mut seen: BTreeSet<(FutureId, String)> = BTreeSet::new();
        for r in self.log.of_kind(EventKind::Deliver) {
            if let Some(f) = r.future {
                if !seen.insert((f, r.detail.clone())) {
                    self.violations
                        .push(format!("duplicate delivery of {f} to {}", r.detail));
                }
            }
        }
        let stateful: BTreeSet<&String> = self
            .env
            .descriptors
            .iter()
            .filter(|(_, d)| d.directives.stateful)
            .map(|(k, _)| k)
            .collect();
        if !stateful.is_empty() {
            self.violations
                .extend(stateful_order_violations(&self.log, &self.ctls, &stateful));
        }
        for (loc, c) in &self.ctls {
            if c.status == Status::Terminated && c.active_count() > 0 {
                self.violations
                    .push(format!("{loc} terminated with active futures"));
            }
        }
    }
}

/// Per-session start order of stateful agents must follow creation order.
fn stateful_order_violations(
    log: &EventLog,
    ctls: &BTreeMap<Location, ComponentController>,
    stateful: &BTreeSet<&String>,
) -> Vec<String> {
    let mut session_of: BTreeMap<FutureId, SessionId> = BTreeMap::new();
    for c in ctls.values() {
        for r in c.records() {
            session_of.insert(r.id, r.session);
        }
    }
    let mut last: BTreeMap<(String, SessionId), FutureId> = BTreeMap::new();
    let mut out = Vec::new();
    for r in log.of_kind(EventKind::Start) {
        if !stateful.contains(&r.instance.agent_type) {
            continue;
        }
        let (Some(f), Some(s)) = (r.future, r.future.and_then(|f| session_of.get(&f).copied()))
        else {
            continue;
        };
        if let Some(prev) = last.insert((r.instance.agent_type.clone(), s), f) {
            if prev > f {
                out.push(format!("stateful order: {f} started after {prev} in {s}"));
            }
        }
    }
    out
}

/// Runs a scenario with default options.
pub fn run_scenario(scenario: &Scenario) -> Result<(RunMetrics, EventLog)> {
    Ok(Runtime::new(scenario.clone())?.run())
}

pub fn run_scenario_with(
    scenario: &Scenario,
    options: RunOptions,
) -> Result<(RunMetrics, EventLog)> {
    Ok(Runtime::with_options(scenario.clone(), options)?.run())
}
