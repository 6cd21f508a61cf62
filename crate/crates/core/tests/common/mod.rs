#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use agentflow::eventlog::{EventKind, EventLog};
use agentflow::model::{
    AgentDirectives, Arg, ContentDigest, ControlCommand, FutureState, Location, MigrateTarget,
    Payload, SessionId, SimTime, Target,
};
use agentflow::sim::bench::{self, GlobalLoopConfig, TwoLevelConfig};
use agentflow::sim::metrics::RunMetrics;
use agentflow::sim::profile::ServiceDist;
use agentflow::sim::{MigrationFuzz, RunOptions, Runtime};
use agentflow::state::StateLayer;
use agentflow::workflow::logic::{AgentLogic, CallContext};
use agentflow::workflow::program::{head, ArgTemplate, CountExpr, Step};
use agentflow::workflow::scenario::{self, Scenario};
use agentflow::workflow::ValueResult;
use agentflow::Error;

pub const BUILTINS: [&str; 3] = ["financial_analyst", "router", "swe"];

pub fn builtin(name: &str, seed: u64) -> Scenario {
    let mut s = scenario::builtin(name).expect("builtin");
    s.seed = seed;
    s
}

/// Every profile replaced by a constant service time equal to its mean.
pub fn deterministic(mut s: Scenario) -> Scenario {
    for p in s.fleet.profiles.values_mut() {
        p.distribution = ServiceDist::Deterministic {
            ms: p.distribution.mean_ms(),
        };
    }
    s
}

/// Runs to completion and lets `inspect` look at the final runtime.
pub fn run_with<T>(
    s: &Scenario,
    opts: RunOptions,
    inspect: impl FnOnce(&Runtime) -> T,
) -> (T, RunMetrics, EventLog) {
    let mut rt = Runtime::with_options(s.clone(), opts).expect("scenario validates");
    rt.schedule_arrivals();
    rt.run_to_end();
    let t = inspect(&rt);
    let (m, log) = rt.finish();
    (t, m, log)
}

// ---- graphs ----

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Graph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

fn node(session: SessionId, label: &str) -> String {
    format!("{session}/{label}")
}

fn consumer_node(loc: &Location, drivers: &[Location]) -> String {
    if drivers.contains(loc) {
        "@driver".into()
    } else {
        format!("@{}", loc.agent_type)
    }
}

/// The graph induced by future metadata: dependency edges between futures
/// and consumer edges from a future to the kind of party it serves.
pub fn observed_graph(rt: &Runtime) -> Graph {
    let mut g = Graph::default();
    let mut seen = BTreeSet::new();
    let mut label_of = BTreeMap::new();
    for c in rt.controllers() {
        for r in c.records() {
            assert!(seen.insert(r.id), "{} hosted twice", r.id);
            label_of.insert(r.id, node(r.session, &r.label));
        }
    }
    for c in rt.controllers() {
        for r in c.records() {
            let me = node(r.session, &r.label);
            g.nodes.insert(me.clone());
            for d in &r.dependencies {
                g.edges.insert((label_of[&d.future].clone(), me.clone()));
            }
            let mut consumers = BTreeSet::new();
            for l in &r.consumers {
                assert!(consumers.insert(l), "{} lists consumer {l} twice", r.id);
                g.edges.insert((me.clone(), consumer_node(l, rt.drivers())));
            }
        }
    }
    g
}

#[derive(Clone)]
enum Bound {
    One(usize),
    Many(Vec<usize>),
}

impl Bound {
    fn ids(&self) -> Vec<usize> {
        match self {
            Bound::One(i) => vec![*i],
            Bound::Many(v) => v.clone(),
        }
    }
}

struct OracleFuture {
    node: String,
    value: Result<Payload, String>,
}

/// Synchronous reference interpreter: runs each request's program to
/// completion in program order and records the call graph it implies.
struct Oracle<'a> {
    s: &'a Scenario,
    layers: BTreeMap<String, StateLayer>,
    graph: Graph,
    futures: Vec<OracleFuture>,
    session: SessionId,
    input: Payload,
}

type Scope = BTreeMap<String, Bound>;

impl Oracle<'_> {
    fn poll(&mut self, i: usize) -> Result<Payload, String> {
        let f = &self.futures[i];
        self.graph.edges.insert((f.node.clone(), "@driver".into()));
        f.value.clone()
    }

    fn count(&mut self, c: &CountExpr, scope: &Scope) -> Result<u32, String> {
        match c {
            CountExpr::Fixed(n) => Ok(*n),
            CountExpr::From(name) => {
                let Bound::One(i) = scope[name] else {
                    panic!("count from a collection")
                };
                let v = self.poll(i)?;
                Ok(head(&v)
                    .strip_prefix("count=")
                    .expect("count head")
                    .parse()
                    .expect("count"))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn invoke(
        &mut self,
        bind: &str,
        agent: &str,
        method: &str,
        args: &[ArgTemplate],
        scope: &Scope,
        path: &str,
        item: Option<u32>,
    ) -> usize {
        let label = format!("{path}/{bind}");
        let me = node(self.session, &label);
        let mut values = Vec::new();
        let mut deps: Vec<usize> = Vec::new();
        for a in args {
            match a {
                ArgTemplate::Input => values.push(self.input.clone()),
                ArgTemplate::Item => {
                    values.push(Payload::text(format!("item={}", item.unwrap_or(0))))
                }
                ArgTemplate::Const(c) => values.push(Payload::text(c)),
                ArgTemplate::Ref(n) => {
                    for d in scope[n].ids() {
                        values.push(
                            self.futures[d]
                                .value
                                .clone()
                                .unwrap_or_else(|_| Payload::text("")),
                        );
                        if !deps.contains(&d) {
                            deps.push(d);
                        }
                    }
                }
            }
        }
        for d in &deps {
            let from = self.futures[*d].node.clone();
            self.graph.edges.insert((from.clone(), me.clone()));
            self.graph.edges.insert((from, format!("@{agent}")));
        }
        let target = Target::new(agent, method);
        let instance = Location::new(agent, 0);
        let managed = self.s.fleet.agents[agent].directives.managed_state;
        let layer = self
            .layers
            .entry(agent.to_string())
            .or_insert_with(|| StateLayer::new(instance.clone(), u64::MAX));
        let ctx = CallContext {
            seed: self.s.seed,
            session: self.session,
            target: &target,
            label: &label,
            args: &values,
            instance: &instance,
        };
        let value = self
            .s
            .workflow
            .logic
            .call(&ctx, if managed { Some(layer) } else { None });
        self.graph.nodes.insert(me.clone());
        self.futures.push(OracleFuture { node: me, value });
        self.futures.len() - 1
    }

    fn gather(scope: &mut Scope, scopes: &[Scope], body: &[Step]) {
        for name in agentflow::workflow::program::binds(body) {
            let ids = scopes
                .iter()
                .filter_map(|s| s.get(&name))
                .flat_map(|b| b.ids())
                .collect();
            scope.insert(name, Bound::Many(ids));
        }
    }

    /// `Ok(Some(..))` once the request emits.
    fn run(
        &mut self,
        steps: &[Step],
        scope: &mut Scope,
        path: &str,
        item: Option<u32>,
    ) -> Result<Option<Payload>, String> {
        for step in steps {
            match step {
                Step::Invoke {
                    bind,
                    agent,
                    method,
                    args,
                } => {
                    let i = self.invoke(bind, agent, method, args, scope, path, item);
                    scope.insert(bind.clone(), Bound::One(i));
                }
                Step::Fanout { count, body } => {
                    let n = self.count(count, scope)?;
                    let mut scopes = Vec::new();
                    for i in 0..n {
                        let mut inner = scope.clone();
                        self.run(body, &mut inner, &format!("{path}[{i}]"), Some(i))?;
                        scopes.push(inner);
                    }
                    Self::gather(scope, &scopes, body);
                }
                Step::Gate {
                    on,
                    equals,
                    then,
                    otherwise,
                } => {
                    let Bound::One(i) = scope[on] else {
                        panic!("gate on a collection")
                    };
                    let v = self.poll(i)?;
                    let branch = if head(&v) == equals { then } else { otherwise };
                    if let Some(out) = self.run(branch, scope, path, item)? {
                        return Ok(Some(out));
                    }
                }
                Step::Retry {
                    items,
                    max_rounds,
                    body,
                    check,
                    pass,
                } => {
                    let n = self.count(items, scope)?;
                    let mut finals: Vec<Option<Scope>> = vec![None; n as usize];
                    let mut pending: Vec<u32> = (0..n).collect();
                    for round in 0..*max_rounds {
                        let mut failing = Vec::new();
                        let mut inner_scopes = Vec::new();
                        for &i in &pending {
                            let mut inner = scope.clone();
                            self.run(body, &mut inner, &format!("{path}[{i}]#{round}"), Some(i))?;
                            inner_scopes.push((i, inner));
                        }
                        for (i, inner) in inner_scopes {
                            let Bound::One(c) = inner[check] else {
                                panic!("check on a collection")
                            };
                            match self.poll(c) {
                                Ok(v) if head(&v) == pass => {}
                                _ => failing.push(i),
                            }
                            finals[i as usize] = Some(inner);
                        }
                        pending = failing;
                        if pending.is_empty() {
                            break;
                        }
                    }
                    if !pending.is_empty() {
                        return Err(format!("retry exhausted after {max_rounds} rounds"));
                    }
                    let scopes: Vec<Scope> = finals.into_iter().flatten().collect();
                    Self::gather(scope, &scopes, body);
                }
                Step::Emit { result } => {
                    let b = scope[result].clone();
                    let mut values = Vec::new();
                    for i in b.ids() {
                        values.push(self.poll(i)?);
                    }
                    return Ok(Some(match b {
                        Bound::One(_) => values.remove(0),
                        Bound::Many(_) => {
                            let joined: Vec<String> =
                                values.iter().map(|v| v.digest().short()).collect();
                            Payload::text(format!("all|{}", joined.join(",")))
                        }
                    }));
                }
            }
        }
        Ok(None)
    }
}

/// Ground-truth call graph of a scenario's arrivals, plus each request's
/// emitted digest (`-` for a failed request).
pub fn oracle(s: &Scenario) -> (Graph, BTreeMap<(SessionId, u32), String>) {
    assert_eq!(
        s.arrivals.session.reentry_prob, 0.0,
        "oracle covers fixed request counts"
    );
    let mut o = Oracle {
        s,
        layers: BTreeMap::new(),
        graph: Graph::default(),
        futures: Vec::new(),
        session: SessionId(0),
        input: Payload::text(""),
    };
    let mut results = BTreeMap::new();
    for k in 0..s.arrivals.sessions as u64 {
        let session = SessionId(k);
        for r in 0..s.arrivals.session.requests.max(1) {
            o.session = session;
            o.input = Payload::text(format!("{session}/r{r}"));
            o.graph.nodes.insert(node(session, &format!("r{r}/result")));
            let out = o.run(&s.workflow.steps, &mut Scope::new(), &format!("r{r}"), None);
            let digest = match out {
                Ok(Some(v)) => v.digest().short(),
                _ => "-".into(),
            };
            results.insert((session, r), digest);
        }
    }
    (o.graph, results)
}

pub fn graph_diff(a: &Graph, b: &Graph) -> String {
    let n1: Vec<_> = a.nodes.difference(&b.nodes).take(5).collect();
    let n2: Vec<_> = b.nodes.difference(&a.nodes).take(5).collect();
    let e1: Vec<_> = a.edges.difference(&b.edges).take(5).collect();
    let e2: Vec<_> = b.edges.difference(&a.edges).take(5).collect();
    format!("nodes only observed {n1:?}, only oracle {n2:?}; edges only observed {e1:?}, only oracle {e2:?}")
}

// ---- digests ----

/// Outcome digest of every future, keyed by session and call-site label.
pub fn outcome_digests(rt: &Runtime) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for c in rt.controllers() {
        for r in c.records() {
            let d = match (&r.value, &r.failure) {
                (Some(v), _) => v.digest().short(),
                (None, Some(f)) => format!("failed:{}", f.message),
                _ => format!("{:?}", r.state),
            };
            out.insert(node(r.session, &r.label), d);
        }
    }
    out
}

/// Digest of every session's managed state, wherever it lives.
pub fn state_digests(rt: &Runtime) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for c in rt.controllers() {
        let sessions: BTreeSet<SessionId> = c.records().map(|r| r.session).collect();
        for s in (0..rt.scenario().arrivals.sessions as u64)
            .map(SessionId)
            .chain(sessions)
        {
            for st in c.state.states_of(s) {
                let prev = out.insert(format!("{s}/{}", st.name), st.digest().short());
                assert!(
                    prev.is_none() || prev.as_deref() == Some(&st.digest().short()),
                    "{s}/{} held twice",
                    st.name
                );
            }
        }
    }
    out
}

// ---- checks shared by the acceptance target and the dedicated tests ----

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Check {
        Check {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::INFINITY
    }
}

pub fn two_level_scaling(sizes: &[usize]) -> Check {
    let rows = bench::bench_two_level(sizes, TwoLevelConfig::default());
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    let two = ratio(last.two_level_ms, first.two_level_ms);
    let one = ratio(last.one_level_ms, first.one_level_ms);
    let gap = ratio(last.one_level_ms, last.two_level_ms);
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}:{:.4}/{:.5}",
                r.n_futures, r.one_level_ms, r.two_level_ms
            )
        })
        .collect();
    Check::new(
        two <= 5.0 && one >= 10.0 && gap >= 20.0,
        format!(
            "two-level x{two:.2} (<=5), one-level x{one:.1} (>=10), one/two at {} = {gap:.0} (>=20); ms one/two {}",
            last.n_futures,
            table.join(" ")
        ),
    )
}

pub fn global_loop_scaling(sizes: &[usize]) -> Check {
    let rows = bench::bench_global_loop(sizes, &[32, 64], GlobalLoopConfig::default());
    let at = |nodes: usize, n: usize| {
        rows.iter()
            .find(|r| r.n_nodes == nodes && r.n_futures == n)
            .copied()
            .expect("row")
    };
    let (lo, hi) = (sizes[0], sizes[sizes.len() - 1]);
    let mut pass = true;
    let mut parts = Vec::new();
    for nodes in [32, 64] {
        let c = ratio(at(nodes, hi).collect_ms, at(nodes, lo).collect_ms);
        pass &= c <= 10.0;
        parts.push(format!("collect x{c:.2} at {nodes} nodes"));
    }
    let mut worst: f64 = 1.0;
    for &n in sizes {
        let r = ratio(at(64, n).total_ms, at(32, n).total_ms);
        pass &= (0.5..=2.0).contains(&r);
        worst = if (r - 1.0).abs() > (worst - 1.0).abs() {
            r
        } else {
            worst
        };
    }
    let total = at(64, hi).total_ms.max(at(32, hi).total_ms);
    pass &= total <= 5000.0;
    let h = at(64, hi);
    parts.push(format!("64/32 total ratio worst {worst:.2} (in [0.5,2])"));
    parts.push(format!(
        "at {hi}/64 nodes collect {:.1} decide {:.1} push {:.1} total {:.1} ms (<=5000)",
        h.collect_ms, h.decide_ms, h.push_ms, h.total_ms
    ));
    Check::new(pass, parts.join("; "))
}

pub fn fuzz_opts(seed: u64, per_tick: usize) -> RunOptions {
    RunOptions {
        fuzz: Some(MigrationFuzz { seed, per_tick }),
        no_global: false,
    }
}

pub fn transparency(seeds: &[u64]) -> Check {
    let mut failures = Vec::new();
    let mut migrations = 0;
    let mut states = 0;
    for name in BUILTINS {
        for &seed in seeds {
            let s = builtin(name, seed);
            let ((o0, s0), m0, _) = run_with(&s, RunOptions::default(), |rt| {
                (outcome_digests(rt), state_digests(rt))
            });
            let ((o1, s1), m1, _) = run_with(&s, fuzz_opts(seed, 8), |rt| {
                (outcome_digests(rt), state_digests(rt))
            });
            migrations += m1.migrations;
            states += s0.len();
            let series = |m: &RunMetrics| {
                m.series
                    .iter()
                    .map(|r| (r.session, r.request, r.digest.clone()))
                    .collect::<BTreeSet<_>>()
            };
            if o0 != o1 || s0 != s1 || series(&m0) != series(&m1) || !m1.violations.is_empty() {
                let bad = o0
                    .iter()
                    .find(|(k, v)| o1.get(*k) != Some(v))
                    .map(|(k, _)| k.clone());
                failures.push(format!(
                    "{name}/seed {seed} (first differing future {bad:?}, {} violations)",
                    m1.violations.len()
                ));
            }
        }
    }
    Check::new(
        failures.is_empty() && migrations > 0,
        format!("{migrations} injected migrations completed, {states} session states compared; mismatches: {failures:?}"),
    )
}

/// Every (future, consumer) pair gets exactly one delivery.
pub fn exactly_once(seeds: &[u64], min_events: usize) -> Check {
    let mut events = 0;
    let mut problems = Vec::new();
    let mut pairs = 0usize;
    let mut migrations = 0;
    for name in BUILTINS {
        for &seed in seeds {
            let mut s = builtin(name, seed);
            s.clock.jitter_ms = s.clock.link_delay_ms / 2.0;
            s.policy.tick_ms = 20.0;
            let (consumers, m, log) = run_with(&s, fuzz_opts(seed, 16), |rt| {
                let mut v = Vec::new();
                for c in rt.controllers() {
                    for r in c.records() {
                        if r.state.is_terminal() {
                            for l in &r.consumers {
                                v.push((r.id, l.to_string()));
                            }
                        }
                    }
                }
                v
            });
            events += log.len();
            migrations += m.migrations;
            let mut delivered: BTreeMap<(agentflow::model::FutureId, String), usize> =
                BTreeMap::new();
            for r in log.of_kind(EventKind::Deliver) {
                *delivered
                    .entry((r.future.expect("delivery names a future"), r.detail.clone()))
                    .or_default() += 1;
            }
            for (k, n) in &delivered {
                if *n != 1 {
                    problems.push(format!("{name}/{seed}: {} delivered {n}x to {}", k.0, k.1));
                }
            }
            for k in consumers {
                pairs += 1;
                if !delivered.contains_key(&k) {
                    problems.push(format!("{name}/{seed}: {} never delivered to {}", k.0, k.1));
                }
            }
            problems.extend(m.violations.iter().map(|v| format!("{name}/{seed}: {v}")));
        }
    }
    problems.truncate(5);
    Check::new(
        problems.is_empty() && events >= min_events,
        format!("{events} events (>= {min_events}), {migrations} migrations, {pairs} (future, consumer) pairs; problems: {problems:?}"),
    )
}

pub fn dag_reconstruction(sessions: u32) -> Check {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in BUILTINS {
        let mut s = deterministic(builtin(name, 1));
        s.arrivals.sessions = sessions;
        let (observed, m, _) = run_with(&s, RunOptions::default(), observed_graph);
        let (truth, results) = oracle(&s);
        let got: BTreeMap<(SessionId, u32), String> = m
            .series
            .iter()
            .map(|r| {
                (
                    (r.session, r.request),
                    if r.ok { r.digest.clone() } else { "-".into() },
                )
            })
            .collect();
        let ok = observed == truth && got == results;
        pass &= ok;
        parts.push(if ok {
            format!(
                "{name}: {} nodes {} edges",
                truth.nodes.len(),
                truth.edges.len()
            )
        } else {
            format!("{name}: MISMATCH {}", graph_diff(&observed, &truth))
        });
    }
    Check::new(pass, parts.join("; "))
}

pub struct Paired {
    pub seed: u64,
    pub a: RunMetrics,
    pub b: RunMetrics,
}

pub fn paired(name: &str, a: &[&str], b: &[&str], seeds: &[u64]) -> Vec<Paired> {
    seeds
        .iter()
        .map(|&seed| {
            let run = |p: &[&str]| {
                let mut s = builtin(name, seed);
                s.policy.names = p.iter().map(|x| x.to_string()).collect();
                agentflow::sim::run_scenario(&s).expect("runs").0
            };
            Paired {
                seed,
                a: run(a),
                b: run(b),
            }
        })
        .collect()
}

fn clean(rows: &[Paired]) -> bool {
    rows.iter()
        .all(|r| r.a.violations.is_empty() && r.b.violations.is_empty())
}

pub fn hol_mitigation(seeds: &[u64]) -> Check {
    let rows = paired("financial_analyst", &["fcfs"], &["hol_migration"], seeds);
    let wins = rows
        .iter()
        .filter(|r| r.b.latency.p99 < r.a.latency.p99)
        .count();
    let mean_a: f64 = rows.iter().map(|r| r.a.latency.mean).sum::<f64>() / rows.len() as f64;
    let mean_b: f64 = rows.iter().map(|r| r.b.latency.mean).sum::<f64>() / rows.len() as f64;
    let per: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "s{} p99 {:.0}->{:.0}",
                r.seed, r.a.latency.p99, r.b.latency.p99
            )
        })
        .collect();
    let mean_worst = rows
        .iter()
        .map(|r| ratio(r.b.latency.mean, r.a.latency.mean))
        .fold(0.0, f64::max);
    Check::new(
        wins * 5 >= 4 * rows.len() && mean_worst <= 1.05 && clean(&rows),
        format!(
            "p99 lower on {wins}/{} seeds ({}); mean {mean_a:.1}->{mean_b:.1} ms, worst per-seed ratio {mean_worst:.3} (<=1.05)",
            rows.len(),
            per.join(", ")
        ),
    )
}

pub fn imbalance_adaptation(seeds: &[u64]) -> Check {
    let rows = paired("router", &["fcfs"], &["resource_reassign"], seeds);
    let mut pass = clean(&rows);
    let mut per = Vec::new();
    for r in &rows {
        let q = ratio(r.b.imbalance_index, r.a.imbalance_index);
        pass &= q <= 0.5 && r.b.latency.mean < r.a.latency.mean;
        per.push(format!(
            "s{} imbalance {:.2}->{:.2} (x{q:.2}) mean {:.1}->{:.1} ms",
            r.seed, r.a.imbalance_index, r.b.imbalance_index, r.a.latency.mean, r.b.latency.mean
        ));
    }
    Check::new(pass, per.join("; "))
}

pub fn pct(a: f64, b: f64) -> f64 {
    (b - a) / a * 100.0
}

pub fn srtf_sign(seeds: &[u64]) -> Check {
    let rows = paired("financial_analyst", &["fcfs"], &["srtf"], seeds);
    let a: f64 = rows.iter().map(|r| r.a.latency.mean).sum::<f64>() / rows.len() as f64;
    let b: f64 = rows.iter().map(|r| r.b.latency.mean).sum::<f64>() / rows.len() as f64;
    let per: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "s{} {:+.1}%",
                r.seed,
                pct(r.a.latency.mean, r.b.latency.mean)
            )
        })
        .collect();
    Check::new(
        b <= a && clean(&rows),
        format!(
            "mean completion {a:.2} -> {b:.2} ms ({:+.2}%; per seed {})",
            pct(a, b),
            per.join(", ")
        ),
    )
}

pub fn lpt_sign(seeds: &[u64]) -> Check {
    let rows = paired("swe", &["fcfs"], &["lpt"], seeds);
    let a: f64 = rows.iter().map(|r| r.a.makespan_ms).sum::<f64>() / rows.len() as f64;
    let b: f64 = rows.iter().map(|r| r.b.makespan_ms).sum::<f64>() / rows.len() as f64;
    let per: Vec<String> = rows
        .iter()
        .map(|r| format!("s{} {:+.1}%", r.seed, pct(r.a.makespan_ms, r.b.makespan_ms)))
        .collect();
    Check::new(
        b <= a && clean(&rows),
        format!(
            "makespan {a:.1} -> {b:.1} ms ({:+.2}%; per seed {})",
            pct(a, b),
            per.join(", ")
        ),
    )
}

pub fn determinism() -> Check {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in BUILTINS {
        let s = builtin(name, 7);
        let runs: Vec<(String, String)> = (0..2)
            .map(|_| {
                let (m, log) = agentflow::sim::run_scenario(&s).expect("runs");
                let mut lat = Vec::new();
                m.write_latency_csv(&mut lat).expect("csv");
                (
                    m.to_json() + &String::from_utf8(lat).expect("utf8"),
                    log.to_text(),
                )
            })
            .collect();
        let same = runs[0] == runs[1];
        pass &= same;
        parts.push(format!(
            "{name}: {} log bytes {}",
            runs[0].1.len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    Check::new(pass, parts.join("; "))
}

pub fn digest_of(text: &str) -> String {
    ContentDigest::of(text.as_bytes()).short()
}

/// Stateful agents start each session's calls in creation order.
pub fn stateful_order(seed: u64, policy: &str, fuzz: bool) -> Result<usize, String> {
    let mut s = scenario::financial_analyst();
    s.seed = seed;
    s.arrivals.sessions = 20;
    s.fleet
        .agents
        .get_mut("analyst")
        .unwrap()
        .directives
        .stateful = true;
    s.policy.names = vec![policy.to_string()];
    let opts = if fuzz {
        fuzz_opts(seed, 8)
    } else {
        RunOptions::default()
    };
    let (session_of, m, log) = run_with(&s, opts, |rt| {
        rt.controllers()
            .flat_map(|c| c.records().map(|r| (r.id, r.session)))
            .collect::<BTreeMap<_, _>>()
    });
    if !m.violations.is_empty() {
        return Err(format!("violations: {:?}", m.violations));
    }
    if m.completed != 60 {
        return Err(format!("{} of 60 requests completed", m.completed));
    }
    let mut last = BTreeMap::new();
    let mut starts = 0;
    for r in log.of_kind(EventKind::Start) {
        if r.instance.agent_type != "analyst" {
            continue;
        }
        let f = r.future.ok_or("start without future")?;
        starts += 1;
        if let Some(prev) = last.insert(session_of[&f], f) {
            if prev >= f {
                return Err(format!("{f} started after {prev}"));
            }
        }
    }
    Ok(starts)
}

/// `validate` rejects a descriptor exactly when it combines managed state
/// with batching, and the scenario error names the field.
pub fn batch_exclusion(d: AgentDirectives) -> Result<(), String> {
    let bad = d.batchable && d.managed_state;
    if d.validate("x").is_err() != bad {
        return Err(format!("descriptor validate disagrees for {d:?}"));
    }
    let mut s = scenario::financial_analyst();
    s.fleet.agents.get_mut("analyst").unwrap().directives = AgentDirectives {
        max_instances: 8,
        ..d
    };
    match s.validate() {
        Ok(()) if bad => Err("scenario accepted batchable managed agent".into()),
        Err(e) if !bad => Err(format!("unexpected error {e}")),
        Err(e)
            if !e
                .to_string()
                .contains("fleet.agents.analyst.directives.batchable") =>
        {
            Err(format!("error lacks field path: {e}"))
        }
        _ => Ok(()),
    }
}

/// Provisioning stops at `max_instances` and killing stops at `min_instances`.
pub fn instance_bounds(min: u32, max: u32, start: u32) -> Result<(), String> {
    let mut s = scenario::router(0.5);
    let coder = s.fleet.agents.get_mut("coder").unwrap();
    coder.instances = start;
    coder.directives.min_instances = min;
    coder.directives.max_instances = max;
    let mut rt = Runtime::new(s).map_err(|e| e.to_string())?;
    let live = |rt: &Runtime| rt.roster().live("coder").len() as u32;
    let mut node = 0;
    loop {
        match rt.apply_lifecycle(ControlCommand::Provision {
            agent_type: "coder".into(),
            node: node % 3,
        }) {
            Ok(()) => node += 1,
            Err(Error::DirectiveBound(_)) => break,
            Err(e) => return Err(e.to_string()),
        }
        if live(&rt) > max {
            return Err(format!("{} live above max {max}", live(&rt)));
        }
    }
    if live(&rt) != max {
        return Err(format!(
            "provisioning stopped at {} below max {max}",
            live(&rt)
        ));
    }
    loop {
        let victim = rt
            .roster()
            .live("coder")
            .last()
            .cloned()
            .ok_or("no live coder")?;
        match rt.apply_lifecycle(ControlCommand::Kill { instance: victim }) {
            Ok(()) => rt.run_to_end(),
            Err(Error::DirectiveBound(_)) => break,
            Err(e) => return Err(e.to_string()),
        }
        if live(&rt) < min {
            return Err(format!("{} live below min {min}", live(&rt)));
        }
    }
    if live(&rt) != min {
        return Err(format!("killing stopped at {} above min {min}", live(&rt)));
    }
    let (m, _) = rt.finish();
    if m.violations.is_empty() {
        Ok(())
    } else {
        Err(format!("violations: {:?}", m.violations))
    }
}

fn solve_once(rt: &mut Runtime) -> agentflow::workflow::FutureHandle {
    let session = rt.new_session();
    rt.invoke(
        session,
        "coder",
        "solve",
        vec![Arg::Value(Payload::text("task"))],
        "solve",
    )
    .expect("coder.solve exists")
}

/// A running future migrates only through the preemption hook; without one
/// the request is rejected and the call finishes where it started.
pub fn preemption_gate(preemptable: bool, delay_ms: f64) -> Result<(), String> {
    let mut s = scenario::router(0.5);
    s.fleet.profiles.get_mut("llm").unwrap().distribution =
        ServiceDist::Deterministic { ms: 1000.0 };
    s.fleet
        .agents
        .get_mut("coder")
        .unwrap()
        .directives
        .preemptable = preemptable.then(|| "checkpoint".to_string());
    let mut rt = Runtime::new(s).map_err(|e| e.to_string())?;
    let h = solve_once(&mut rt);
    let start = rt.now();
    rt.run_until(start + SimTime::from_millis_f64(delay_ms));
    let locate = |rt: &Runtime| {
        rt.controllers()
            .find_map(|c| c.record(h.id).map(|r| (c.location().clone(), r.state)))
            .expect("record exists")
    };
    let (source, state) = locate(&rt);
    if state != FutureState::Running {
        return Err(format!(
            "expected Running at {delay_ms} ms, found {state:?}"
        ));
    }
    let dest = Location::new("coder", (source.instance + 1) % 4);
    rt.inject(
        &source,
        ControlCommand::Migrate {
            target: MigrateTarget::Future(h.id),
            source: source.clone(),
            destination: dest.clone(),
        },
    )
    .map_err(|e| e.to_string())?;
    let ValueResult::Value(v) = rt.value(&h, SimTime::from_millis_f64(10_000.0)) else {
        return Err("call did not resolve".into());
    };
    let kinds: Vec<EventKind> = rt
        .log()
        .records()
        .iter()
        .filter(|r| r.future == Some(h.id))
        .map(|r| r.event)
        .collect();
    let (at, _) = locate(&rt);
    if preemptable {
        if !kinds.contains(&EventKind::Preempt)
            || !kinds.contains(&EventKind::MigrateStep(6))
            || at != dest
        {
            return Err(format!(
                "preemptable call ended at {at} with events {kinds:?}"
            ));
        }
    } else if !kinds.contains(&EventKind::MigrateReject)
        || kinds.contains(&EventKind::MigrateStep(1))
        || at != source
    {
        return Err(format!(
            "non-preemptable call ended at {at} with events {kinds:?}"
        ));
    }
    let mut plain = Runtime::new(rt.scenario().clone()).map_err(|e| e.to_string())?;
    let h2 = solve_once(&mut plain);
    match plain.value(&h2, SimTime::from_millis_f64(10_000.0)) {
        ValueResult::Value(w) if w == v => Ok(()),
        other => Err(format!("value differs from an unmigrated run: {other:?}")),
    }
}

pub fn directive_enforcement() -> Check {
    let mut failures = Vec::new();
    let mut starts = 0;
    for seed in 1..=3 {
        for policy in ["fcfs", "hol_migration", "srtf"] {
            for fuzz in [false, true] {
                match stateful_order(seed, policy, fuzz) {
                    Ok(n) => starts += n,
                    Err(e) => {
                        failures.push(format!("stateful seed {seed} {policy} fuzz={fuzz}: {e}"))
                    }
                }
            }
        }
    }
    let mut combos = 0;
    for bits in 0..16u32 {
        let d = AgentDirectives {
            batchable: bits & 1 != 0,
            managed_state: bits & 2 != 0,
            stateful: bits & 4 != 0,
            max_batch: 1 + (bits >> 3),
            ..Default::default()
        };
        combos += 1;
        if let Err(e) = batch_exclusion(d) {
            failures.push(e);
        }
    }
    let mut bounds = 0;
    for min in 1..=3 {
        for max in min..=min + 2 {
            for start in min..=max {
                bounds += 1;
                if let Err(e) = instance_bounds(min, max, start) {
                    failures.push(format!("bounds {min}/{max}/{start}: {e}"));
                }
            }
        }
    }
    for preemptable in [false, true] {
        for delay in [1.0, 400.0, 900.0] {
            if let Err(e) = preemption_gate(preemptable, delay) {
                failures.push(format!("preempt={preemptable} at {delay} ms: {e}"));
            }
        }
    }
    let detail = format!(
        "{starts} ordered stateful starts over 18 runs, {combos} directive combos, {bounds} bound cases, 6 migrate gates; {} failures{}",
        failures.len(),
        failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
    );
    Check::new(failures.is_empty(), detail)
}
