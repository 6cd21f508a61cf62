//! The driver: interprets workflow programs on top of the futures API.
//!
//! Evaluation is replay-style. Each time a future the request is blocked on
//! becomes available, the program is re-run from the top; invocations are
//! memoized by label so nothing is created twice, and the run stops at the
//! first value it still has to wait for.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::program::{binds, head, ArgTemplate, CountExpr, Step, WorkflowProgram};
use crate::controller::{ComponentController, Ctx, Outcome, Timer};
use crate::eventlog::EventKind;
use crate::global::SessionInfo;
use crate::model::{
    Arg, ContentDigest, FailureRecord, FutureId, Payload, SessionId, SimTime, Target,
};
use crate::state::KvHint;

/// Per-session request model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionPlan {
    pub requests: u32,
    /// Mean of the exponential think time between a response and the next
    /// request of the same session.
    pub think_time_ms: f64,
    /// Probability that a completed request is followed by a re-entry.
    pub reentry_prob: f64,
    pub max_reentries: u32,
}

impl Default for SessionPlan {
    fn default() -> Self {
        SessionPlan {
            requests: 1,
            think_time_ms: 0.0,
            reentry_prob: 0.0,
            max_reentries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub session: SessionId,
    pub request: u32,
    pub start: SimTime,
    pub end: SimTime,
    pub ok: bool,
    pub result: FutureId,
    pub digest: String,
}

impl Completion {
    pub fn latency_ms(&self) -> f64 {
        self.end.saturating_sub(self.start).as_millis_f64()
    }
}

#[derive(Debug, Clone)]
struct SessionRun {
    program: Arc<WorkflowProgram>,
    plan: SessionPlan,
    planned: u32,
    next: u32,
    reentries: u32,
    reissued: u32,
    depth: u32,
    input: Option<Payload>,
    done: bool,
}

#[derive(Debug, Clone)]
struct RequestRun {
    input: Payload,
    memo: BTreeMap<String, FutureId>,
    result: FutureId,
    started: SimTime,
    reissued: u32,
    done: bool,
}

type Key = (SessionId, u32);

#[derive(Debug, Clone)]
enum Binding {
    One(FutureId),
    Many(Vec<FutureId>),
}

impl Binding {
    fn ids(&self) -> Vec<FutureId> {
        match self {
            Binding::One(f) => vec![*f],
            Binding::Many(v) => v.clone(),
        }
    }
}

type Scope = BTreeMap<String, Binding>;

enum Flow {
    Go,
    Blocked,
    Emit(Outcome),
    Fail(FailureRecord),
}

#[derive(Debug, Default, Clone)]
pub struct DriverState {
    seed: u64,
    sessions: BTreeMap<SessionId, SessionRun>,
    requests: BTreeMap<Key, RequestRun>,
    blocked: BTreeMap<FutureId, BTreeSet<Key>>,
    results: BTreeMap<FutureId, Key>,
    pub completions: Vec<Completion>,
    pub kv_hints: bool,
}

struct Eval<'r, 'c, 'x, 'e> {
    ctl: &'c mut ComponentController,
    ctx: &'x mut Ctx<'e>,
    session: SessionId,
    req: &'r mut RequestRun,
    blocked_on: Vec<FutureId>,
    reissued: u32,
    depth: u32,
}

impl Eval<'_, '_, '_, '_> {
    fn poll(&mut self, id: FutureId) -> Option<Outcome> {
        let o = self.ctl.poll(id, self.ctx);
        if o.is_none() {
            self.blocked_on.push(id);
        }
        o
    }

    fn lookup(&self, scope: &Scope, name: &str) -> Result<Binding, FailureRecord> {
        scope
            .get(name)
            .cloned()
            .ok_or_else(|| FailureRecord::new(None, format!("`{name}` is unbound")))
    }

    fn count(&mut self, c: &CountExpr, scope: &Scope) -> Result<Option<u32>, FailureRecord> {
        match c {
            CountExpr::Fixed(n) => Ok(Some(*n)),
            CountExpr::From(name) => {
                let Binding::One(f) = self.lookup(scope, name)? else {
                    return Err(FailureRecord::new(
                        None,
                        format!("`{name}` is not a single future"),
                    ));
                };
                match self.poll(f) {
                    None => Ok(None),
                    Some(Err(e)) => Err(e),
                    Some(Ok(v)) => head(&v)
                        .strip_prefix("count=")
                        .and_then(|n| n.parse().ok())
                        .map(Some)
                        .ok_or_else(|| {
                            FailureRecord::new(None, format!("`{name}` did not yield a count"))
                        }),
                }
            }
        }
    }

    fn run(&mut self, steps: &[Step], scope: &mut Scope, path: &str, item: Option<u32>) -> Flow {
        for step in steps {
            let flow = self.step(step, scope, path, item);
            if !matches!(flow, Flow::Go) {
                return flow;
            }
        }
        Flow::Go
    }

    fn step(&mut self, step: &Step, scope: &mut Scope, path: &str, item: Option<u32>) -> Flow {
        match step {
            Step::Invoke {
                bind,
                agent,
                method,
                args,
            } => {
                let label = format!("{path}/{bind}");
                let id = match self.req.memo.get(&label) {
                    Some(id) => *id,
                    None => {
                        let mut a = Vec::new();
                        for t in args {
                            match t {
                                ArgTemplate::Input => a.push(Arg::Value(self.req.input.clone())),
                                ArgTemplate::Item => a.push(Arg::Value(Payload::text(format!(
                                    "item={}",
                                    item.unwrap_or(0)
                                )))),
                                ArgTemplate::Const(s) => a.push(Arg::Value(Payload::text(s))),
                                ArgTemplate::Ref(n) => match self.lookup(scope, n) {
                                    Ok(b) => a.extend(b.ids().into_iter().map(Arg::Future)),
                                    Err(e) => return Flow::Fail(e),
                                },
                            }
                        }
                        let target = Target::new(agent.clone(), method.clone());
                        match self.ctl.create_future(
                            self.session,
                            target,
                            a,
                            label.clone(),
                            self.ctx,
                        ) {
                            Ok(id) => {
                                self.req.memo.insert(label, id);
                                id
                            }
                            Err(e) => return Flow::Fail(FailureRecord::new(None, e.to_string())),
                        }
                    }
                };
                self.depth = self.depth.max(self.ctl.depth_of(id).unwrap_or(1));
                scope.insert(bind.clone(), Binding::One(id));
                Flow::Go
            }
            Step::Fanout { count, body } => {
                let n = match self.count(count, scope) {
                    Ok(Some(n)) => n,
                    Ok(None) => return Flow::Blocked,
                    Err(e) => return Flow::Fail(e),
                };
                let mut scopes = Vec::new();
                let mut blocked = false;
                for i in 0..n {
                    let mut inner = scope.clone();
                    match self.run(body, &mut inner, &format!("{path}[{i}]"), Some(i)) {
                        Flow::Go => {}
                        Flow::Blocked => blocked = true,
                        Flow::Fail(e) => return Flow::Fail(e),
                        Flow::Emit(_) => {
                            return Flow::Fail(FailureRecord::new(None, "emit inside fanout"))
                        }
                    }
                    scopes.push(inner);
                }
                if blocked {
                    return Flow::Blocked;
                }
                gather(scope, &scopes, body);
                Flow::Go
            }
            Step::Gate {
                on,
                equals,
                then,
                otherwise,
            } => {
                let Binding::One(f) = (match self.lookup(scope, on) {
                    Ok(b) => b,
                    Err(e) => return Flow::Fail(e),
                }) else {
                    return Flow::Fail(FailureRecord::new(
                        None,
                        format!("gate on `{on}` needs one future"),
                    ));
                };
                match self.poll(f) {
                    None => Flow::Blocked,
                    Some(Err(e)) => Flow::Fail(e),
                    Some(Ok(v)) => {
                        let branch = if head(&v) == equals { then } else { otherwise };
                        self.run(branch, scope, path, item)
                    }
                }
            }
            Step::Retry {
                items,
                max_rounds,
                body,
                check,
                pass,
            } => {
                let n = match self.count(items, scope) {
                    Ok(Some(n)) => n,
                    Ok(None) => return Flow::Blocked,
                    Err(e) => return Flow::Fail(e),
                };
                let mut finals: Vec<Option<Scope>> = vec![None; n as usize];
                let mut pending: Vec<u32> = (0..n).collect();
                let mut diagnostics = Vec::new();
                for round in 0..*max_rounds {
                    if round > 0 {
                        self.reissued += pending.len() as u32;
                    }
                    let mut blocked = false;
                    let mut round_scopes = Vec::new();
                    for &i in &pending {
                        let mut inner = scope.clone();
                        match self.run(body, &mut inner, &format!("{path}[{i}]#{round}"), Some(i)) {
                            Flow::Go => {}
                            Flow::Blocked => blocked = true,
                            Flow::Fail(e) => return Flow::Fail(e),
                            Flow::Emit(_) => {
                                return Flow::Fail(FailureRecord::new(None, "emit inside retry"))
                            }
                        }
                        round_scopes.push((i, inner));
                    }
                    if blocked {
                        return Flow::Blocked;
                    }
                    let mut failing = Vec::new();
                    let mut unresolved = false;
                    for (i, inner) in round_scopes {
                        let Some(Binding::One(f)) = inner.get(check).cloned() else {
                            return Flow::Fail(FailureRecord::new(
                                None,
                                format!("retry check `{check}` unbound"),
                            ));
                        };
                        match self.poll(f) {
                            None => unresolved = true,
                            Some(Ok(v)) if head(&v) == pass => finals[i as usize] = Some(inner),
                            Some(_) => {
                                failing.push(i);
                                finals[i as usize] = Some(inner);
                            }
                        }
                    }
                    if unresolved {
                        return Flow::Blocked;
                    }
                    if !failing.is_empty() {
                        diagnostics.push(format!("round {}: items {failing:?} failed", round + 1));
                    }
                    pending = failing;
                    if pending.is_empty() {
                        break;
                    }
                }
                if !pending.is_empty() {
                    let mut f = FailureRecord::new(
                        None,
                        format!("retry exhausted after {max_rounds} rounds"),
                    );
                    f.diagnostics = diagnostics;
                    return Flow::Fail(f);
                }
                let scopes: Vec<Scope> = finals.into_iter().flatten().collect();
                gather(scope, &scopes, body);
                Flow::Go
            }
            Step::Emit { result } => {
                let b = match self.lookup(scope, result) {
                    Ok(b) => b,
                    Err(e) => return Flow::Fail(e),
                };
                let ids = b.ids();
                let mut values = Vec::new();
                let mut blocked = false;
                for id in &ids {
                    match self.poll(*id) {
                        None => blocked = true,
                        Some(Err(e)) => return Flow::Emit(Err(e)),
                        Some(Ok(v)) => values.push(v),
                    }
                }
                if blocked {
                    return Flow::Blocked;
                }
                match b {
                    Binding::One(_) => Flow::Emit(Ok(values.remove(0))),
                    Binding::Many(_) => {
                        let joined: Vec<String> =
                            values.iter().map(|v| v.digest().short()).collect();
                        Flow::Emit(Ok(Payload::text(format!("all|{}", joined.join(",")))))
                    }
                }
            }
        }
    }
}

/// Binds every name of `body` as the collection over `scopes`.
fn gather(scope: &mut Scope, scopes: &[Scope], body: &[Step]) {
    for name in binds(body) {
        let mut ids = Vec::new();
        for s in scopes {
            if let Some(b) = s.get(&name) {
                ids.extend(b.ids());
            }
        }
        scope.insert(name, Binding::Many(ids));
    }
}

fn rng_for(seed: u64, session: SessionId, request: u32, purpose: &str) -> ChaCha8Rng {
    let key = format!("{seed}/{session}/r{request}/{purpose}");
    ChaCha8Rng::seed_from_u64(ContentDigest::of(key.as_bytes()).prefix_u64())
}

impl DriverState {
    pub fn new(seed: u64, kv_hints: bool) -> Self {
        DriverState {
            seed,
            kv_hints,
            ..Default::default()
        }
    }

    pub fn open_requests(&self) -> usize {
        self.requests.values().filter(|r| !r.done).count()
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.values().filter(|s| !s.done).count()
    }

    pub fn reentries(&self, session: SessionId) -> u32 {
        self.sessions
            .get(&session)
            .map_or(0, |s| s.reentries + s.reissued)
    }

    pub fn total_reentries(&self) -> u64 {
        self.sessions
            .values()
            .map(|s| (s.reentries + s.reissued) as u64)
            .sum()
    }

    pub fn result_of(&self, session: SessionId, request: u32) -> Option<FutureId> {
        self.requests.get(&(session, request)).map(|r| r.result)
    }

    /// Admits a session and issues its first request. An explicit `input`
    /// replaces the generated per-request input.
    pub fn open_session(
        &mut self,
        session: SessionId,
        program: Arc<WorkflowProgram>,
        plan: SessionPlan,
        input: Option<Payload>,
        ctl: &mut ComponentController,
        ctx: &mut Ctx,
    ) -> FutureId {
        self.sessions.insert(
            session,
            SessionRun {
                program,
                planned: plan.requests.max(1),
                plan,
                next: 0,
                reentries: 0,
                reissued: 0,
                depth: 0,
                input,
                done: false,
            },
        );
        self.start_request(session, ctl, ctx)
    }

    fn start_request(
        &mut self,
        session: SessionId,
        ctl: &mut ComponentController,
        ctx: &mut Ctx,
    ) -> FutureId {
        let s = self.sessions.get_mut(&session).expect("open session");
        let index = s.next;
        s.next += 1;
        let input = s
            .input
            .clone()
            .unwrap_or_else(|| Payload::text(format!("{session}/r{index}")));
        let result = ctl.create_local(session, format!("r{index}/result"), ctx);
        ctx.log.push(
            ctx.now,
            ctl.location(),
            EventKind::Request,
            Some(result),
            format!("{session} r{index}"),
        );
        self.results.insert(result, (session, index));
        self.requests.insert(
            (session, index),
            RequestRun {
                input,
                memo: BTreeMap::new(),
                result,
                started: ctx.now,
                reissued: 0,
                done: false,
            },
        );
        self.evaluate((session, index), ctl, ctx);
        result
    }

    pub fn on_timer(&mut self, timer: Timer, ctl: &mut ComponentController, ctx: &mut Ctx) {
        match timer {
            Timer::NextRequest(s) => {
                if self.sessions.get(&s).is_some_and(|r| !r.done) {
                    self.start_request(s, ctl, ctx);
                }
            }
        }
    }

    pub fn on_future_ready(&mut self, id: FutureId, ctl: &mut ComponentController, ctx: &mut Ctx) {
        if let Some(keys) = self.blocked.remove(&id) {
            for k in keys {
                self.evaluate(k, ctl, ctx);
            }
        }
    }

    fn evaluate(&mut self, key: Key, ctl: &mut ComponentController, ctx: &mut Ctx) {
        let Some(mut req) = self.requests.remove(&key) else {
            return;
        };
        if req.done {
            self.requests.insert(key, req);
            return;
        }
        let program = self.sessions[&key.0].program.clone();
        let mut ev = Eval {
            ctl,
            ctx,
            session: key.0,
            req: &mut req,
            blocked_on: Vec::new(),
            reissued: 0,
            depth: 0,
        };
        let mut scope = Scope::new();
        let flow = ev.run(&program.steps, &mut scope, &format!("r{}", key.1), None);
        let (blocked_on, reissued, depth) = (ev.blocked_on, ev.reissued, ev.depth);
        let outcome = match flow {
            Flow::Blocked => None,
            Flow::Emit(o) => Some(o),
            Flow::Fail(f) => Some(Err(f)),
            Flow::Go => Some(Err(FailureRecord::new(None, "program ended without emit"))),
        };
        let before = req.reissued;
        req.reissued = before.max(reissued);
        if let Some(s) = self.sessions.get_mut(&key.0) {
            s.depth = depth;
            s.reissued += req.reissued - before;
        }
        match outcome {
            None => {
                for f in blocked_on {
                    self.blocked.entry(f).or_default().insert(key);
                }
                self.requests.insert(key, req);
                self.publish_info(key.0, ctl);
            }
            Some(o) => {
                req.done = true;
                let ok = o.is_ok();
                let digest = match &o {
                    Ok(v) => v.digest().short(),
                    Err(_) => "-".into(),
                };
                let result = req.result;
                let started = req.started;
                self.requests.insert(key, req);
                let _ = ctl.complete_local(result, o, ctx);
                ctx.log.push(
                    ctx.now,
                    ctl.location(),
                    EventKind::Complete,
                    Some(result),
                    format!("{} r{} {}", key.0, key.1, if ok { "ok" } else { "failed" }),
                );
                self.completions.push(Completion {
                    session: key.0,
                    request: key.1,
                    start: started,
                    end: ctx.now,
                    ok,
                    result,
                    digest,
                });
                self.after_request(key, ctl, ctx);
            }
        }
    }

    fn after_request(&mut self, key: Key, ctl: &mut ComponentController, ctx: &mut Ctx) {
        let seed = self.seed;
        let s = self.sessions.get_mut(&key.0).expect("open session");
        if s.plan.reentry_prob > 0.0 && s.reentries < s.plan.max_reentries {
            let p = s.plan.reentry_prob.min(1.0);
            if rng_for(seed, key.0, key.1, "reentry").random_bool(p) {
                s.reentries += 1;
                s.planned += 1;
            }
        }
        let more = s.next < s.planned;
        let think_mean = s.plan.think_time_ms;
        let pins: Vec<_> = ctl.routing.pins_of(key.0).cloned().collect();
        if more {
            let think = if think_mean > 0.0 {
                let mut rng = rng_for(seed, key.0, key.1, "think");
                SimTime::from_millis_f64(
                    Exp::new(1.0 / think_mean)
                        .expect("positive mean")
                        .sample(&mut rng),
                )
            } else {
                SimTime::ZERO
            };
            if self.kv_hints {
                let until = ctx.now
                    + SimTime::from_millis_f64(3.0 * think_mean)
                    + SimTime::from_millis_f64(1.0);
                for p in &pins {
                    ctl.send_kv_hint(
                        p,
                        KvHint::Retain {
                            session: key.0,
                            until,
                        },
                        ctx,
                    );
                }
            }
            ctx.timers.push((think, Timer::NextRequest(key.0)));
        } else {
            s.done = true;
            if self.kv_hints {
                for p in &pins {
                    ctl.send_kv_hint(p, KvHint::Drop { session: key.0 }, ctx);
                }
            }
        }
        self.publish_info(key.0, ctl);
    }

    fn publish_info(&self, session: SessionId, ctl: &ComponentController) {
        let Some(s) = self.sessions.get(&session) else {
            return;
        };
        let info = SessionInfo {
            session,
            open_requests: self
                .requests
                .range((session, 0)..=(session, u32::MAX))
                .filter(|(_, r)| !r.done)
                .count() as u32,
            pins: ctl.routing.pins_of(session).cloned().collect(),
            reentries: s.reentries + s.reissued,
            depth: s.depth,
            done: s.done,
        };
        let _ = ctl.store().put(
            &format!("sessions/{session}/info"),
            Payload::text(crate::canonical::to_text(&info)),
        );
    }
}
