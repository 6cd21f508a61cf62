//! Scenario files: a workflow, the fleet that serves it, the arrival
//! process, the policy, the clock and the seed.
//!
//! Scenarios are TOML documents with the top-level sections `seed`,
//! `[workflow]`, `[fleet]`, `[arrivals]`, `[policy]` and `[clock]`. Every
//! field is listed in the README.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::driver::SessionPlan;
use super::logic::ScriptedLogic;
use super::program::{ArgTemplate, CountExpr, Step, WorkflowProgram};
use crate::error::{Error, Result};
use crate::model::{AgentDescriptor, AgentDirectives, MethodDecl, NodeId};
use crate::policy::{Params, PolicyRegistry, PolicySpec};
use crate::sim::profile::ExecutorProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub workflow: WorkflowSection,
    pub fleet: Fleet,
    pub arrivals: Arrivals,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub clock: ClockSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSection {
    pub name: String,
    /// Drivers send retention hints for pinned session caches.
    #[serde(default = "yes")]
    pub kv_hints: bool,
    pub steps: Vec<Step>,
    /// Simulated outputs keyed by `agent.method`.
    #[serde(default)]
    pub logic: ScriptedLogic,
}

impl WorkflowSection {
    pub fn program(&self) -> WorkflowProgram {
        WorkflowProgram {
            name: self.name.clone(),
            steps: self.steps.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub methods: Vec<String>,
    pub profile: String,
    pub instances: u32,
    #[serde(default)]
    pub directives: AgentDirectives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fleet {
    #[serde(default = "one")]
    pub nodes: u32,
    #[serde(default = "one")]
    pub drivers: u32,
    pub agents: BTreeMap<String, AgentSpec>,
    pub profiles: BTreeMap<String, ExecutorProfile>,
}

impl Fleet {
    pub fn descriptors(&self) -> BTreeMap<String, AgentDescriptor> {
        self.agents
            .iter()
            .map(|(name, a)| {
                let d = AgentDescriptor {
                    agent_type: name.clone(),
                    methods: a
                        .methods
                        .iter()
                        .map(|m| MethodDecl {
                            name: m.clone(),
                            params: Vec::new(),
                        })
                        .collect(),
                    directives: a.directives.clone(),
                    executor_profile: a.profile.clone(),
                };
                (name.clone(), d)
            })
            .collect()
    }

    /// Initial placement: agent instances in type order, then drivers, dealt
    /// round-robin over nodes.
    pub fn placement(&self) -> Vec<(String, u32, NodeId)> {
        let mut out = Vec::new();
        let mut k = 0u32;
        for (name, a) in &self.agents {
            for i in 0..a.instances {
                out.push((name.clone(), i, k % self.nodes));
                k += 1;
            }
        }
        for i in 0..self.drivers {
            out.push((
                crate::controller::DRIVER_TYPE.to_string(),
                i,
                i % self.nodes,
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    /// Open-loop session arrivals.
    Poisson { rate_per_s: f64 },
    /// Every session arrives at time zero.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrivals {
    pub process: ArrivalProcess,
    pub sessions: u32,
    #[serde(default)]
    pub session: SessionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub names: Vec<String>,
    #[serde(default)]
    pub params: Params,
    #[serde(default = "tick")]
    pub tick_ms: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            names: vec!["fcfs".into()],
            params: Params::new(),
            tick_ms: tick(),
        }
    }
}

impl PolicySection {
    pub fn spec(&self) -> PolicySpec {
        PolicySpec {
            names: self.names.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    /// Paces virtual time against the wall clock.
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSection {
    pub mode: ClockMode,
    /// Stop at this virtual time even if work remains.
    pub horizon_ms: Option<f64>,
    /// One-way delay of every controller-to-controller message.
    pub link_delay_ms: f64,
    /// Extra uniform delay per message, at most half the link delay.
    pub jitter_ms: f64,
    /// Wall seconds per virtual second in wall mode.
    pub time_scale: f64,
}

impl Default for ClockSection {
    fn default() -> Self {
        ClockSection {
            mode: ClockMode::Virtual,
            horizon_ms: None,
            link_delay_ms: 0.5,
            jitter_ms: 0.0,
            time_scale: 1.0,
        }
    }
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn tick() -> f64 {
    100.0
}

fn invoked(steps: &[Step], out: &mut Vec<(String, String)>) {
    for s in steps {
        match s {
            Step::Invoke { agent, method, .. } => out.push((agent.clone(), method.clone())),
            Step::Fanout { body, .. } | Step::Retry { body, .. } => invoked(body, out),
            Step::Gate {
                then, otherwise, ..
            } => {
                invoked(then, out);
                invoked(otherwise, out);
            }
            Step::Emit { .. } => {}
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.workflow.program().validate()?;
        let f = &self.fleet;
        if f.nodes == 0 {
            return Err(Error::config("fleet.nodes", "must be positive"));
        }
        if f.drivers == 0 {
            return Err(Error::config("fleet.drivers", "must be positive"));
        }
        for (name, p) in &f.profiles {
            p.validate(name)?;
        }
        for (name, d) in f.descriptors() {
            d.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::config(format!("fleet.{path}"), message),
                e => e,
            })?;
            let a = &f.agents[&name];
            if !f.profiles.contains_key(&a.profile) {
                return Err(Error::config(
                    format!("fleet.agents.{name}.profile"),
                    format!("unknown profile `{}`", a.profile),
                ));
            }
            let dir = &a.directives;
            if a.instances < dir.min_instances || a.instances > dir.max_instances {
                return Err(Error::config(
                    format!("fleet.agents.{name}.instances"),
                    format!(
                        "{} outside [{}, {}]",
                        a.instances, dir.min_instances, dir.max_instances
                    ),
                ));
            }
        }
        let mut calls = Vec::new();
        invoked(&self.workflow.steps, &mut calls);
        for (agent, method) in calls {
            let Some(a) = f.agents.get(&agent) else {
                return Err(Error::config(
                    "workflow.steps",
                    format!("unknown agent `{agent}`"),
                ));
            };
            if !a.methods.contains(&method) {
                return Err(Error::config(
                    "workflow.steps",
                    format!("`{agent}` has no method `{method}`"),
                ));
            }
        }
        for (key, m) in &self.workflow.logic.methods {
            if let Err((field, why)) = m.output.check() {
                return Err(Error::config(format!("workflow.logic.{key}.{field}"), why));
            }
            let ok = key.split_once('.').is_some_and(|(a, m)| {
                f.agents
                    .get(a)
                    .is_some_and(|s| s.methods.iter().any(|x| x == m))
            });
            if !ok {
                return Err(Error::config(
                    format!("workflow.logic.{key}"),
                    "no such agent method",
                ));
            }
        }
        match self.arrivals.process {
            ArrivalProcess::Poisson { rate_per_s }
                if !(rate_per_s > 0.0 && rate_per_s.is_finite()) =>
            {
                return Err(Error::config(
                    "arrivals.process.rate_per_s",
                    "must be positive",
                ));
            }
            _ => {}
        }
        let plan = &self.arrivals.session;
        if !(0.0..=1.0).contains(&plan.reentry_prob) {
            return Err(Error::config(
                "arrivals.session.reentry_prob",
                "must be in [0, 1]",
            ));
        }
        if plan.think_time_ms < 0.0 {
            return Err(Error::config(
                "arrivals.session.think_time_ms",
                "must be non-negative",
            ));
        }
        PolicyRegistry::default().build(&self.policy.spec())?;
        if !positive(self.policy.tick_ms) {
            return Err(Error::config("policy.tick_ms", "must be positive"));
        }
        let c = &self.clock;
        if !positive(c.link_delay_ms) {
            return Err(Error::config("clock.link_delay_ms", "must be positive"));
        }
        if !(0.0..=c.link_delay_ms / 2.0).contains(&c.jitter_ms) {
            return Err(Error::config(
                "clock.jitter_ms",
                "must be in [0, link_delay_ms / 2]",
            ));
        }
        if !positive(c.time_scale) {
            return Err(Error::config("clock.time_scale", "must be positive"));
        }
        if c.horizon_ms.is_some_and(|h| !positive(h)) {
            return Err(Error::config("clock.horizon_ms", "must be positive"));
        }
        Ok(())
    }
}

fn positive(x: f64) -> bool {
    x > 0.0
}

fn invoke(bind: &str, agent: &str, method: &str, args: Vec<ArgTemplate>) -> Step {
    Step::Invoke {
        bind: bind.into(),
        agent: agent.into(),
        method: method.into(),
        args,
    }
}

fn reference(name: &str) -> ArgTemplate {
    ArgTemplate::Ref(name.into())
}

fn agent(
    methods: &[&str],
    profile: &str,
    instances: u32,
    directives: AgentDirectives,
) -> AgentSpec {
    AgentSpec {
        methods: methods.iter().map(|m| m.to_string()).collect(),
        profile: profile.into(),
        instances,
        directives,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["financial_analyst", "router", "swe"];

/// The three builtin workloads with default parameters.
pub fn builtin_scenarios() -> BTreeMap<String, Scenario> {
    BUILTIN_NAMES
        .iter()
        .map(|n| (n.to_string(), builtin(n).expect("builtin")))
        .collect()
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "financial_analyst" => Some(financial_analyst()),
        "router" => Some(router(0.9)),
        "swe" => Some(swe(0.3)),
        _ => None,
    }
}

/// An analyst plans, fans out to four specialists, then aggregates. The
/// analyst keeps per-session history in managed state; sessions issue
/// several requests separated by think time.
pub fn financial_analyst() -> Scenario {
    use super::logic::OutputModel;
    use crate::sim::profile::ServiceDist;
    use crate::state::KvModel;

    let specialists = ["filings", "market", "news", "risk"];
    let mut steps = vec![invoke("plan", "analyst", "plan", vec![ArgTemplate::Input])];
    for s in specialists {
        steps.push(invoke(s, s, "analyze", vec![reference("plan")]));
    }
    steps.push(invoke(
        "report",
        "analyst",
        "aggregate",
        specialists.iter().map(|s| reference(s)).collect(),
    ));
    steps.push(Step::Emit {
        result: "report".into(),
    });

    let mut agents = BTreeMap::new();
    let analyst = AgentDirectives {
        managed_state: true,
        max_instances: 8,
        ..Default::default()
    };
    agents.insert(
        "analyst".into(),
        agent(&["plan", "aggregate"], "llm", 4, analyst),
    );
    for s in specialists {
        agents.insert(
            s.into(),
            agent(&["analyze"], "tool", 2, AgentDirectives::default()),
        );
    }
    let mut profiles = BTreeMap::new();
    profiles.insert(
        "llm".into(),
        ExecutorProfile {
            kv: Some(KvModel::default()),
            ..ExecutorProfile::new(ServiceDist::Bimodal {
                p_long: 0.1,
                short_ms: 20.0,
                long_ms: 300.0,
            })
        },
    );
    profiles.insert(
        "tool".into(),
        ExecutorProfile::new(ServiceDist::Bimodal {
            p_long: 0.05,
            short_ms: 10.0,
            long_ms: 150.0,
        }),
    );
    let logic = ScriptedLogic::new()
        .with("analyst.plan", OutputModel::Echo, true)
        .with("analyst.aggregate", OutputModel::Echo, true)
        .with("filings.analyze", OutputModel::Echo, false)
        .with("market.analyze", OutputModel::Echo, false)
        .with("news.analyze", OutputModel::Echo, false)
        .with("risk.analyze", OutputModel::Echo, false);
    Scenario {
        seed: 1,
        workflow: WorkflowSection {
            name: "financial_analyst".into(),
            kv_hints: true,
            steps,
            logic,
        },
        fleet: Fleet {
            nodes: 4,
            drivers: 1,
            agents,
            profiles,
        },
        arrivals: Arrivals {
            process: ArrivalProcess::Poisson { rate_per_s: 12.0 },
            sessions: 200,
            session: SessionPlan {
                requests: 3,
                think_time_ms: 200.0,
                reentry_prob: 0.0,
                max_reentries: 0,
            },
        },
        policy: PolicySection::default(),
        clock: ClockSection::default(),
    }
}

/// A classifier sends each request to a coding agent or a chat agent;
/// `skew` is the share of coding requests.
pub fn router(skew: f64) -> Scenario {
    use super::logic::OutputModel;
    use crate::sim::profile::ServiceDist;

    let steps = vec![
        invoke("kind", "classifier", "classify", vec![ArgTemplate::Input]),
        Step::Gate {
            on: "kind".into(),
            equals: "code".into(),
            then: vec![invoke(
                "answer",
                "coder",
                "solve",
                vec![ArgTemplate::Input, reference("kind")],
            )],
            otherwise: vec![invoke(
                "answer",
                "chat",
                "reply",
                vec![ArgTemplate::Input, reference("kind")],
            )],
        },
        Step::Emit {
            result: "answer".into(),
        },
    ];
    let branch = AgentDirectives {
        min_instances: 1,
        max_instances: 8,
        ..Default::default()
    };
    let mut agents = BTreeMap::new();
    agents.insert(
        "classifier".into(),
        agent(
            &["classify"],
            "fast",
            2,
            AgentDirectives {
                min_instances: 2,
                max_instances: 4,
                ..Default::default()
            },
        ),
    );
    agents.insert("coder".into(), agent(&["solve"], "llm", 4, branch.clone()));
    agents.insert("chat".into(), agent(&["reply"], "llm", 4, branch));
    let mut profiles = BTreeMap::new();
    profiles.insert(
        "fast".into(),
        ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 10.0 }),
    );
    profiles.insert(
        "llm".into(),
        ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 40.0 }),
    );
    let logic = ScriptedLogic::new()
        .with(
            "classifier.classify",
            OutputModel::Choice {
                options: vec!["code".into(), "chat".into()],
                weights: vec![skew, 1.0 - skew],
            },
            false,
        )
        .with("coder.solve", OutputModel::Echo, false)
        .with("chat.reply", OutputModel::Echo, false);
    Scenario {
        seed: 1,
        workflow: WorkflowSection {
            name: "router".into(),
            kv_hints: false,
            steps,
            logic,
        },
        fleet: Fleet {
            nodes: 10,
            drivers: 1,
            agents,
            profiles,
        },
        arrivals: Arrivals {
            process: ArrivalProcess::Poisson { rate_per_s: 90.0 },
            sessions: 2000,
            session: SessionPlan::default(),
        },
        policy: PolicySection::default(),
        clock: ClockSection::default(),
    }
}

/// A planner splits a task into subtasks; each is implemented and tested,
/// and failing subtasks are re-issued. `p_fail` is the per-test failure
/// probability of ordinary sessions; a quarter of sessions are hard and
/// fail twice as often, capped at 0.9.
pub fn swe(p_fail: f64) -> Scenario {
    use super::logic::OutputModel;
    use crate::sim::profile::ServiceDist;

    let steps = vec![
        Step::Retry {
            items: CountExpr::Fixed(1),
            max_rounds: 4,
            body: vec![
                invoke("plan", "planner", "plan", vec![ArgTemplate::Input]),
                Step::Fanout {
                    count: CountExpr::From("plan".into()),
                    body: vec![
                        invoke(
                            "code",
                            "developer",
                            "implement",
                            vec![ArgTemplate::Input, ArgTemplate::Item, reference("plan")],
                        ),
                        invoke("test", "tester", "run", vec![reference("code")]),
                    ],
                },
                invoke("verdict", "tester", "integrate", vec![reference("test")]),
            ],
            check: "verdict".into(),
            pass: "pass".into(),
        },
        Step::Emit {
            result: "verdict".into(),
        },
    ];
    let mut agents = BTreeMap::new();
    agents.insert(
        "planner".into(),
        agent(&["plan"], "plan", 2, AgentDirectives::default()),
    );
    agents.insert(
        "developer".into(),
        agent(&["implement"], "dev", 4, AgentDirectives::default()),
    );
    agents.insert(
        "tester".into(),
        agent(&["run", "integrate"], "test", 2, AgentDirectives::default()),
    );
    let mut profiles = BTreeMap::new();
    profiles.insert(
        "plan".into(),
        ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 20.0 }),
    );
    profiles.insert(
        "dev".into(),
        ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 40.0 }),
    );
    profiles.insert(
        "test".into(),
        ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 15.0 }),
    );
    let logic = ScriptedLogic::new()
        .with("planner.plan", OutputModel::Count { min: 2, max: 5 }, false)
        .with(
            "tester.integrate",
            OutputModel::PassFail {
                p_fail,
                hard_fraction: if p_fail > 0.0 { 0.25 } else { 0.0 },
                hard_p_fail: (2.0 * p_fail).min(0.9),
            },
            false,
        );
    Scenario {
        seed: 1,
        workflow: WorkflowSection {
            name: "swe".into(),
            kv_hints: false,
            steps,
            logic,
        },
        fleet: Fleet {
            nodes: 4,
            drivers: 1,
            agents,
            profiles,
        },
        arrivals: Arrivals {
            process: ArrivalProcess::Batch,
            sessions: 40,
            session: SessionPlan::default(),
        },
        policy: PolicySection::default(),
        clock: ClockSection::default(),
    }
}
