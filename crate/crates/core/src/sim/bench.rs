//! Wall-clock control-plane benchmarks.
//!
//! Both emulate many nodes inside one process: every node is an independent
//! store plus its controllers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::channel;
use serde::{Deserialize, Serialize};

use crate::controller::routing::RoutingTable;
use crate::global::{FutureSummary, GlobalController};
use crate::model::{AgentDirectives, FutureId, FutureState, Location, Payload, SessionId, SimTime};
use crate::policy::{PolicyRegistry, PolicySpec};
use crate::store::{MemStore, NodeStore};

pub const DEFAULT_SIZES: [usize; 8] = [
    1 << 10,
    1 << 11,
    1 << 12,
    1 << 13,
    1 << 14,
    1 << 15,
    1 << 16,
    1 << 17,
];

const AGENT: &str = "agent";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelRow {
    pub n_futures: usize,
    /// Median submit-to-decision time per future through the central queue.
    pub one_level_ms: f64,
    /// Median time of a local routing decision.
    pub two_level_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TwoLevelConfig {
    /// Component controllers creating futures.
    pub controllers: usize,
    /// Executor instances the futures are routed over.
    pub instances: u32,
}

impl Default for TwoLevelConfig {
    fn default() -> Self {
        TwoLevelConfig {
            controllers: 8,
            instances: 16,
        }
    }
}

fn fleet(n: u32) -> Vec<Location> {
    (0..n).map(|i| Location::new(AGENT, i)).collect()
}

fn weighted_table(live: &[Location]) -> RoutingTable {
    let mut t = RoutingTable::new();
    let weights = (0..live.len()).map(|i| 1.0 + (i % 3) as f64).collect();
    t.set_weighted(AGENT, live.to_vec(), weights);
    t
}

/// Local decisions: each controller routes its own futures with the rule the
/// global controller installed.
fn two_level(n: usize, cfg: TwoLevelConfig) -> f64 {
    let live = fleet(cfg.instances);
    let per = n.div_ceil(cfg.controllers);
    let samples: Vec<Vec<Duration>> = thread::scope(|sc| {
        let handles: Vec<_> = (0..cfg.controllers)
            .map(|c| {
                let live = live.clone();
                sc.spawn(move || {
                    let mut table = weighted_table(&live);
                    let mut placed: BTreeMap<FutureId, Location> = BTreeMap::new();
                    let mut samples = Vec::with_capacity(per);
                    for i in 0..per {
                        let id = FutureId::new(c as u32, i as u64);
                        let t0 = Instant::now();
                        let at = table
                            .route(SessionId(i as u64), AGENT, &live, false)
                            .expect("live fleet");
                        placed.insert(id, at);
                        samples.push(t0.elapsed());
                    }
                    samples
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("controller thread"))
            .collect()
    });
    median_ms(samples.concat())
}

fn median_ms(mut v: Vec<Duration>) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    m.as_secs_f64() * 1000.0
}

struct Request {
    id: FutureId,
    session: SessionId,
    submitted: Instant,
    reply: channel::Sender<(FutureId, Instant, Location)>,
}

/// Central decisions: every future's routing request goes through one
/// decision queue served by a single global controller thread.
fn one_level(n: usize, cfg: TwoLevelConfig) -> f64 {
    let live = fleet(cfg.instances);
    let per = n.div_ceil(cfg.controllers);
    let (tx, rx) = channel::unbounded::<Request>();
    thread::scope(|sc| {
        let central_live = live.clone();
        sc.spawn(move || {
            let mut table = weighted_table(&central_live);
            let mut placed: BTreeMap<FutureId, Location> = BTreeMap::new();
            for req in rx {
                let at = table
                    .route(req.session, AGENT, &central_live, false)
                    .expect("live fleet");
                placed.insert(req.id, at.clone());
                let _ = req.reply.send((req.id, req.submitted, at));
            }
        });
        let handles: Vec<_> = (0..cfg.controllers)
            .map(|c| {
                let tx = tx.clone();
                sc.spawn(move || {
                    let (rtx, rrx) = channel::unbounded();
                    for i in 0..per {
                        tx.send(Request {
                            id: FutureId::new(c as u32, i as u64),
                            session: SessionId(i as u64),
                            submitted: Instant::now(),
                            reply: rtx.clone(),
                        })
                        .expect("central queue open");
                    }
                    drop(rtx);
                    rrx.into_iter()
                        .map(|(_, submitted, _)| submitted.elapsed())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        drop(tx);
        let samples: Vec<Vec<Duration>> = handles
            .into_iter()
            .map(|h| h.join().expect("controller thread"))
            .collect();
        median_ms(samples.concat())
    })
}

/// Per-future routing latency with central versus local decisions.
pub fn bench_two_level(sizes: &[usize], cfg: TwoLevelConfig) -> Vec<TwoLevelRow> {
    sizes
        .iter()
        .map(|&n| TwoLevelRow {
            n_futures: n,
            one_level_ms: one_level(n, cfg),
            two_level_ms: two_level(n, cfg),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalLoopRow {
    pub n_nodes: usize,
    pub n_futures: usize,
    pub collect_ms: f64,
    pub decide_ms: f64,
    pub push_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalLoopConfig {
    pub instances_per_node: u32,
    /// Futures per session.
    pub session_size: usize,
    /// Emulated node-store RPC round trip during collection.
    pub rpc_rtt: Duration,
    /// Ticks measured per point; the median total is reported.
    pub reps: usize,
}

impl Default for GlobalLoopConfig {
    fn default() -> Self {
        GlobalLoopConfig {
            instances_per_node: 2,
            session_size: 4,
            rpc_rtt: Duration::from_millis(5),
            reps: 3,
        }
    }
}

fn emulated_nodes(n_nodes: usize, n_futures: usize, cfg: GlobalLoopConfig) -> Vec<Arc<MemStore>> {
    let stores: Vec<Arc<MemStore>> = (0..n_nodes as u32)
        .map(|n| Arc::new(MemStore::new(n)))
        .collect();
    let mut locs = Vec::new();
    for (n, s) in stores.iter().enumerate() {
        for k in 0..cfg.instances_per_node {
            let loc = Location::new(AGENT, n as u32 * cfg.instances_per_node + k);
            s.register_instance(loc.clone());
            for (m, v) in [
                ("queue_len", "4"),
                ("running", "1"),
                ("slots", "1"),
                ("status", "live"),
            ] {
                let _ = s.put(&format!("metrics/{loc}/{m}"), Payload::text(v));
            }
            locs.push((n, loc));
        }
    }
    for i in 0..n_futures {
        let (n, loc) = &locs[i % locs.len()];
        let f = FutureSummary {
            id: FutureId::new(0, i as u64),
            session: SessionId((i / cfg.session_size) as u64),
            state: if i % 5 == 0 {
                FutureState::Running
            } else {
                FutureState::Queued
            },
            executor: loc.clone(),
            priority: 0,
            created: SimTime(i as u64),
            queued: Some(SimTime(i as u64 + 1)),
            started: None,
            depth: 1 + (i % cfg.session_size) as u32,
            n_deps: (i % cfg.session_size) as u32,
            pending_deps: 0,
        };
        let _ = stores[*n].put(&format!("futures/{}", f.id), f.encode());
    }
    stores
}

/// One global-controller loop over emulated nodes running SRTF.
pub fn bench_global_loop(
    sizes: &[usize],
    nodes: &[usize],
    cfg: GlobalLoopConfig,
) -> Vec<GlobalLoopRow> {
    let mut rows = Vec::new();
    let spec = PolicySpec {
        names: vec!["srtf".into()],
        params: Default::default(),
    };
    let directives: BTreeMap<String, AgentDirectives> =
        [(AGENT.to_string(), AgentDirectives::default())].into();
    for &n_nodes in nodes {
        for &n in sizes {
            let stores = emulated_nodes(n_nodes, n, cfg);
            let dyn_stores = stores
                .iter()
                .map(|s| s.clone() as Arc<dyn NodeStore>)
                .collect();
            let policy = PolicyRegistry::default()
                .build(&spec)
                .expect("srtf is built in");
            let mut gc = GlobalController::new(dyn_stores, policy, directives.clone());
            gc.rpc_rtt = cfg.rpc_rtt;
            gc.parallel = true;
            let mut reports = Vec::new();
            for r in 0..cfg.reps.max(1) {
                reports.push(gc.tick(SimTime(r as u64)).report);
                for s in &stores {
                    for loc in s.instances() {
                        let _ = s.drain_commands(&loc);
                    }
                }
            }
            reports.sort_by(|a, b| a.total_ms().total_cmp(&b.total_ms()));
            let m = &reports[reports.len() / 2];
            rows.push(GlobalLoopRow {
                n_nodes,
                n_futures: n,
                collect_ms: m.collect_ms,
                decide_ms: m.decide_ms,
                push_ms: m.push_ms,
                total_ms: m.total_ms(),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_level_rows_cover_sizes() {
        let rows = bench_two_level(&[64, 128], TwoLevelConfig::default());
        assert_eq!(rows.len(), 2);
        assert!(rows
            .iter()
            .all(|r| r.one_level_ms > 0.0 && r.two_level_ms > 0.0));
    }

    #[test]
    fn global_loop_issues_srtf_commands() {
        let cfg = GlobalLoopConfig {
            rpc_rtt: Duration::ZERO,
            reps: 1,
            ..Default::default()
        };
        let stores = emulated_nodes(2, 40, cfg);
        let dyn_stores = stores
            .iter()
            .map(|s| s.clone() as Arc<dyn NodeStore>)
            .collect();
        let policy = PolicyRegistry::default()
            .build(&PolicySpec {
                names: vec!["srtf".into()],
                params: Default::default(),
            })
            .unwrap();
        let mut gc = GlobalController::new(
            dyn_stores,
            policy,
            [(AGENT.to_string(), AgentDirectives::default())].into(),
        );
        let out = gc.tick(SimTime(0));
        assert_eq!(out.report.n_futures, 40);
        assert!(out.report.n_commands > 0);
        let rows = bench_global_loop(&[40], &[2], cfg);
        assert_eq!(rows[0].n_futures, 40);
    }
}
