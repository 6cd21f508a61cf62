use std::collections::BTreeMap;

use crate::model::{Location, SessionId};

/// Per-cycle instance sequence of a weighted rule: each instance appears
/// weight-many times, heaviest first, ties broken by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRule {
    pub instances: Vec<Location>,
    pub weights: Vec<f64>,
    cycle: Vec<usize>,
    cursor: usize,
}

/// Resolution used when weights are not all integral.
const WEIGHT_SLOTS: u64 = 100;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer per-instance counts for one cycle. Integral weights are used as-is;
/// otherwise weights are apportioned over [`WEIGHT_SLOTS`] by largest
/// remainder. Counts are reduced by their gcd.
pub fn cycle_counts(weights: &[f64]) -> Vec<u64> {
    let integral = weights
        .iter()
        .all(|w| (w - w.round()).abs() < 1e-9 && *w < 1e6);
    let mut counts: Vec<u64> = if integral {
        weights.iter().map(|w| w.round() as u64).collect()
    } else {
        let total: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights
            .iter()
            .map(|w| w / total * WEIGHT_SLOTS as f64)
            .collect();
        let mut c: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
        let mut rest = WEIGHT_SLOTS - c.iter().sum::<u64>();
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            c[i] += 1;
            rest -= 1;
        }
        c
    };
    let g = counts.iter().copied().filter(|c| *c > 0).fold(0, gcd);
    if g > 1 {
        for c in &mut counts {
            *c /= g;
        }
    }
    counts
}

impl WeightedRule {
    pub fn new(instances: Vec<Location>, weights: Vec<f64>) -> Self {
        let counts = cycle_counts(&weights);
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.sort_by(|&a, &b| {
            counts[b]
                .cmp(&counts[a])
                .then(instances[a].cmp(&instances[b]))
        });
        let cycle = order
            .into_iter()
            .flat_map(|i| std::iter::repeat_n(i, counts[i] as usize))
            .collect();
        WeightedRule {
            instances,
            weights,
            cycle,
            cursor: 0,
        }
    }

    fn same_rule(&self, instances: &[Location], weights: &[f64]) -> bool {
        self.instances == instances && self.weights == weights
    }

    /// Next instance in the cycle that satisfies `live`.
    fn next(&mut self, live: impl Fn(&Location) -> bool) -> Option<Location> {
        for _ in 0..self.cycle.len() {
            let i = self.cycle[self.cursor % self.cycle.len()];
            self.cursor = (self.cursor + 1) % self.cycle.len();
            if live(&self.instances[i]) {
                return Some(self.instances[i].clone());
            }
        }
        None
    }
}

/// Session pins and weighted rules installed by the global controller.
#[derive(Debug, Default, Clone)]
pub struct RoutingTable {
    pins: BTreeMap<(SessionId, String), Location>,
    weighted: BTreeMap<String, WeightedRule>,
    round_robin: BTreeMap<String, usize>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pin(&mut self, session: SessionId, instance: Location) {
        self.pins
            .insert((session, instance.agent_type.clone()), instance);
    }

    pub fn unpin(&mut self, session: SessionId, agent_type: &str) {
        self.pins.remove(&(session, agent_type.to_string()));
    }

    pub fn pinned(&self, session: SessionId, agent_type: &str) -> Option<&Location> {
        self.pins.get(&(session, agent_type.to_string()))
    }

    pub fn pins_of(&self, session: SessionId) -> impl Iterator<Item = &Location> {
        self.pins
            .range((session, String::new())..)
            .take_while(move |((s, _), _)| *s == session)
            .map(|(_, l)| l)
    }

    pub fn drop_session(&mut self, session: SessionId) {
        self.pins.retain(|(s, _), _| *s != session);
    }

    /// Installs a weighted rule; re-installing an identical rule keeps its
    /// cursor so repeated policy output does not perturb routing.
    pub fn set_weighted(&mut self, agent_type: &str, instances: Vec<Location>, weights: Vec<f64>) {
        if let Some(r) = self.weighted.get(agent_type) {
            if r.same_rule(&instances, &weights) {
                return;
            }
        }
        self.weighted.insert(
            agent_type.to_string(),
            WeightedRule::new(instances, weights),
        );
    }

    pub fn weighted_rule(&self, agent_type: &str) -> Option<&WeightedRule> {
        self.weighted.get(agent_type)
    }

    /// Picks an executor: live session pin, else the weighted rule, else
    /// equal round-robin over `live` (sorted). Creates a pin when
    /// `pin_sessions` is set and none existed.
    pub fn route(
        &mut self,
        session: SessionId,
        agent_type: &str,
        live: &[Location],
        pin_sessions: bool,
    ) -> Option<Location> {
        let key = (session, agent_type.to_string());
        if let Some(p) = self.pins.get(&key) {
            if live.contains(p) {
                return Some(p.clone());
            }
            self.pins.remove(&key);
        }
        let chosen = self
            .weighted
            .get_mut(agent_type)
            .and_then(|r| r.next(|l| live.contains(l)))
            .or_else(|| {
                if live.is_empty() {
                    return None;
                }
                let c = self.round_robin.entry(agent_type.to_string()).or_insert(0);
                let l = live[*c % live.len()].clone();
                *c = c.wrapping_add(1);
                Some(l)
            })?;
        if pin_sessions {
            self.pins.insert(key, chosen.clone());
        }
        Some(chosen)
    }
}
