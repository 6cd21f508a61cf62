use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{param, Params, Policy};
use crate::global::{FutureSummary, GlobalSnapshot};
use crate::model::{ControlCommand, FutureState, Location, MigrateTarget, SessionId};

/// Weighted routing proportional to spare capacity.
pub struct LoadBalanceRouting {
    pub epsilon: f64,
}

impl LoadBalanceRouting {
    pub fn from_params(p: &Params) -> Self {
        LoadBalanceRouting {
            epsilon: param(p, "epsilon", 0.01),
        }
    }
}

impl Policy for LoadBalanceRouting {
    fn name(&self) -> &str {
        "load_balance_routing"
    }

    fn decide(&mut self, snap: &GlobalSnapshot) -> Vec<ControlCommand> {
        let mut out = Vec::new();
        for (agent, live) in &snap.roster {
            let spare: Vec<f64> = live
                .iter()
                .map(|l| {
                    let v = &snap.instances[l];
                    (v.slots.max(1) as f64 - v.backlog() as f64).max(self.epsilon)
                })
                .collect();
            let total: f64 = spare.iter().sum();
            out.push(ControlCommand::RouteWeighted {
                agent_type: agent.clone(),
                instances: live.clone(),
                weights: spare.iter().map(|s| s / total).collect(),
            });
        }
        out
    }
}

/// Moves queued work stuck behind a long-running head job to the least
/// backlogged peer.
pub struct HolMigration {
    pub wait_factor: f64,
    pub head_factor: f64,
    pub margin: i64,
}

impl HolMigration {
    pub fn from_params(p: &Params) -> Self {
        HolMigration {
            wait_factor: param(p, "hol_wait_factor", 5.0),
            head_factor: param(p, "hol_head_factor", 2.0),
            margin: param(p, "hol_margin", 2.0) as i64,
        }
    }
}

fn mean_service(snap: &GlobalSnapshot, live: &[Location]) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for l in live {
        let v = &snap.instances[l];
        sum += v.mean_service_ms * v.completed as f64;
        n += v.completed as f64;
    }
    if n > 0.0 {
        sum / n
    } else {
        0.0
    }
}

impl Policy for HolMigration {
    fn name(&self) -> &str {
        "hol_migration"
    }

    fn decide(&mut self, snap: &GlobalSnapshot) -> Vec<ControlCommand> {
        let mut out = Vec::new();
        let mut at: BTreeMap<&Location, Vec<&FutureSummary>> = BTreeMap::new();
        for f in &snap.futures {
            at.entry(&f.executor).or_default().push(f);
        }
        for (agent, live) in &snap.roster {
            let d = snap.directives.get(agent).cloned().unwrap_or_default();
            let mean = mean_service(snap, live);
            if d.stateful || mean <= 0.0 {
                continue;
            }
            let mut backlog: BTreeMap<&Location, i64> = live
                .iter()
                .map(|l| (l, snap.instances[l].backlog() as i64))
                .collect();
            for src in live {
                if snap.instances[src].head_elapsed_ms <= self.head_factor * mean {
                    continue;
                }
                let here = at.get(src).cloned().unwrap_or_default();
                let mut stuck: Vec<&FutureSummary> = here
                    .iter()
                    .copied()
                    .filter(|f| f.state == FutureState::Queued)
                    .filter(|f| f.age(snap.time).as_millis_f64() > self.wait_factor * mean)
                    .collect();
                stuck.sort_by_key(|f| (f.queued, f.id));
                let mut moved: BTreeSet<SessionId> = BTreeSet::new();
                for f in stuck {
                    let Some(dest) = live
                        .iter()
                        .filter(|l| *l != src)
                        .min_by_key(|l| (backlog[l], *l))
                    else {
                        break;
                    };
                    if backlog[dest] + self.margin > backlog[src] {
                        break;
                    }
                    let (target, n) = if d.managed_state {
                        let busy = here
                            .iter()
                            .any(|g| g.session == f.session && g.state == FutureState::Running);
                        if busy || !moved.insert(f.session) {
                            continue;
                        }
                        let n = here.iter().filter(|g| g.session == f.session).count() as i64;
                        (MigrateTarget::Session(f.session), n)
                    } else {
                        (MigrateTarget::Future(f.id), 1)
                    };
                    *backlog.get_mut(src).unwrap() -= n;
                    *backlog.get_mut(dest).unwrap() += n;
                    out.push(ControlCommand::Migrate {
                        target,
                        source: src.clone(),
                        destination: dest.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Shifts instances from persistently cold agent types to hot ones.
///
/// Load is the time-averaged number of queued plus running futures per
/// execution slot over the last `window` ticks.
pub struct ResourceReassign {
    pub u_hi: f64,
    pub u_lo: f64,
    pub window: usize,
    pub cooldown: u32,
    last: BTreeMap<Location, (f64, f64)>,
    history: BTreeMap<String, VecDeque<f64>>,
    quiet: u32,
}

impl ResourceReassign {
    pub fn from_params(p: &Params) -> Self {
        ResourceReassign {
            u_hi: param(p, "u_hi", 0.8),
            u_lo: param(p, "u_lo", 0.3),
            window: param(p, "window", 10.0) as usize,
            cooldown: param(p, "cooldown", 10.0) as u32,
            last: BTreeMap::new(),
            history: BTreeMap::new(),
            quiet: 0,
        }
    }

    fn observe(&mut self, snap: &GlobalSnapshot) {
        let now = snap.time.as_millis_f64();
        for (agent, live) in &snap.roster {
            let mut loads = Vec::new();
            for l in live {
                let v = &snap.instances[l];
                if let Some((occ, t)) = self.last.insert(l.clone(), (v.occupancy_ms, now)) {
                    if now > t {
                        loads.push((v.occupancy_ms - occ) / ((now - t) * v.slots.max(1) as f64));
                    }
                }
            }
            if !loads.is_empty() {
                let h = self.history.entry(agent.clone()).or_default();
                h.push_back(loads.iter().sum::<f64>() / loads.len() as f64);
                while h.len() > self.window {
                    h.pop_front();
                }
            }
        }
    }
}

impl Policy for ResourceReassign {
    fn name(&self) -> &str {
        "resource_reassign"
    }

    fn decide(&mut self, snap: &GlobalSnapshot) -> Vec<ControlCommand> {
        self.observe(snap);
        if self.quiet > 0 {
            self.quiet -= 1;
            return Vec::new();
        }
        let avg: BTreeMap<&String, f64> = self
            .history
            .iter()
            .filter(|(a, h)| h.len() >= self.window && snap.roster.contains_key(*a))
            .map(|(a, h)| (a, h.iter().sum::<f64>() / h.len() as f64))
            .collect();
        let count = |a: &str| snap.live(a).len() as u32;
        let dir = |a: &str| snap.directives.get(a).cloned().unwrap_or_default();
        let hot = avg
            .iter()
            .filter(|(a, u)| **u > self.u_hi && count(a) < dir(a).max_instances)
            .max_by(|x, y| x.1.total_cmp(y.1));
        let cold = avg
            .iter()
            .filter(|(a, u)| **u < self.u_lo && count(a) > dir(a).min_instances)
            .min_by(|x, y| x.1.total_cmp(y.1));
        let (Some((hot, _)), Some((cold, _))) = (hot, cold) else {
            return Vec::new();
        };
        let (hot, cold) = ((*hot).clone(), (*cold).clone());
        if hot == cold {
            return Vec::new();
        }
        let victim = snap
            .live(&cold)
            .iter()
            .min_by_key(|l| (snap.instances[*l].backlog(), std::cmp::Reverse(l.instance)))
            .expect("cold type has live instances")
            .clone();
        let Some(node) = snap.node_of(&victim) else {
            return Vec::new();
        };
        self.quiet = self.cooldown;
        self.history.clear();
        vec![
            ControlCommand::Kill { instance: victim },
            ControlCommand::Provision {
                agent_type: hot,
                node,
            },
        ]
    }
}

/// Sessions at later call-graph stages first.
///
/// A session's stage is the smallest depth among its unfinished futures.
pub struct Srtf;

impl Policy for Srtf {
    fn name(&self) -> &str {
        "srtf"
    }

    fn decide(&mut self, snap: &GlobalSnapshot) -> Vec<ControlCommand> {
        let mut stage: BTreeMap<SessionId, u32> = BTreeMap::new();
        let mut hosts: BTreeSet<(SessionId, &str)> = BTreeSet::new();
        for f in &snap.futures {
            if f.state.is_terminal() || !snap.roster.contains_key(&f.executor.agent_type) {
                continue;
            }
            let d = stage.entry(f.session).or_insert(u32::MAX);
            *d = (*d).min(f.depth);
            hosts.insert((f.session, &f.executor.agent_type));
        }
        hosts
            .into_iter()
            .map(|(session, agent)| ControlCommand::SetPriority {
                session,
                priority: stage[&session] as i32,
                agent_type: Some(agent.to_string()),
            })
            .collect()
    }
}

/// Sessions that re-entered the graph first.
pub struct Lpt;

impl Policy for Lpt {
    fn name(&self) -> &str {
        "lpt"
    }

    fn decide(&mut self, snap: &GlobalSnapshot) -> Vec<ControlCommand> {
        snap.sessions
            .iter()
            .filter_map(|(s, v)| {
                let n = v.info.as_ref()?.reentries;
                (n > 0 && !v.hosts.is_empty()).then_some(ControlCommand::SetPriority {
                    session: *s,
                    priority: n as i32,
                    agent_type: None,
                })
            })
            .collect()
    }
}
