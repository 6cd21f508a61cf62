mod common;

use agentflow::model::{Arg, ControlCommand, Payload, SimTime};
use agentflow::sim::metrics::{imbalance_index, percentile};
use agentflow::sim::profile::ServiceDist;
use agentflow::sim::{poisson_arrivals, run_scenario, run_scenario_with, RunOptions, Runtime};
use agentflow::workflow::scenario::{self, router, swe};
use agentflow::workflow::ValueResult;
use common::*;
use proptest::prelude::*;

/// Smallest sample with at least `p * n` samples at or below it.
fn rank_oracle(samples: &[f64], p: f64) -> f64 {
    let need = p * samples.len() as f64;
    let mut best = f64::INFINITY;
    for &x in samples {
        let at_or_below = samples.iter().filter(|&&y| y <= x).count() as f64;
        if at_or_below >= need - 1e-9 && x < best {
            best = x;
        }
    }
    best
}

#[test]
fn runs_are_bit_identical() {
    let c = determinism();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn poisson_mean_gap_matches_rate() {
    for (seed, rate) in [(1, 90.0), (2, 10.0), (3, 250.0)] {
        let t = poisson_arrivals(seed, rate, 20_000);
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        let mean_gap = t.last().unwrap() / t.len() as f64;
        let expect = 1000.0 / rate;
        assert!(
            (mean_gap / expect - 1.0).abs() < 0.05,
            "seed {seed}: gap {mean_gap} vs {expect}"
        );
    }
}

#[test]
fn nearest_rank_examples() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.5), 50.0);
    assert_eq!(percentile(&v, 0.99), 99.0);
    assert_eq!(percentile(&v, 1.0), 100.0);
    assert_eq!(percentile(&[7.0], 0.99), 7.0);
    assert_eq!(imbalance_index(&[1.0, 1.0, 1.0]), 0.0);
    assert!((imbalance_index(&[0.0, 2.0]) - 2.0).abs() < 1e-12);
}

#[test]
fn static_routing_alone_completes() {
    let s = builtin("router", 3);
    let (m, _) = run_scenario_with(
        &s,
        RunOptions {
            no_global: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(m.completed, m.requests);
    assert!(m.commands.is_empty(), "{:?}", m.commands);
    assert_eq!(m.migrations, 0);
    assert!(m.violations.is_empty(), "{:?}", m.violations);
}

#[test]
fn runs_end_once_work_drains_under_a_chatty_policy() {
    let mut s = builtin("financial_analyst", 1);
    s.arrivals.sessions = 13;
    s.policy.names = vec!["load_balance_routing".into()];
    let (m, _) = run_scenario(&s).unwrap();
    assert_eq!(m.completed, 39);
    assert!(
        m.end_ms < m.makespan_ms + 2.0 * s.policy.tick_ms,
        "{} vs {}",
        m.end_ms,
        m.makespan_ms
    );
}

#[test]
fn single_pass_swe_never_reenters() {
    let mut s = swe(0.0);
    s.arrivals.sessions = 40;
    let (m, _) = run_scenario(&s).unwrap();
    assert_eq!(m.session_reentries, 0);
    assert_eq!(m.completed, 40);
}

#[test]
fn a_direct_call_costs_service_time_plus_two_link_delays() {
    for (d, l) in [(10.0, 0.5), (25.0, 2.0), (3.0, 1.0)] {
        let mut s = router(0.5);
        s.clock.link_delay_ms = l;
        s.fleet.profiles.get_mut("llm").unwrap().distribution =
            ServiceDist::Deterministic { ms: d };
        let mut rt = Runtime::new(s).unwrap();
        let session = rt.new_session();
        let t0 = rt.now();
        let h = rt
            .invoke(
                session,
                "coder",
                "solve",
                vec![Arg::Value(Payload::text("x"))],
                "solve",
            )
            .unwrap();
        assert!(matches!(
            rt.value(&h, SimTime::from_millis_f64(1000.0)),
            ValueResult::Value(_)
        ));
        let elapsed = rt.now().saturating_sub(t0).as_millis_f64();
        assert!(
            (elapsed - (d + 2.0 * l)).abs() < 1e-3,
            "d={d} L={l}: {elapsed}"
        );
    }
}

#[test]
fn provisioned_instance_appears_in_the_next_snapshot() {
    let mut rt = Runtime::new(router(0.5)).unwrap();
    let before = rt.snapshot().roster["coder"].len();
    rt.apply_lifecycle(ControlCommand::Provision {
        agent_type: "coder".into(),
        node: 1,
    })
    .unwrap();
    let snap = rt.snapshot();
    assert_eq!(snap.roster["coder"].len(), before + 1);
    let fresh = snap.roster["coder"].last().unwrap();
    assert_eq!(snap.instances[fresh].node, 1);
    assert!(snap.nodes[&1].contains(fresh));
}

#[test]
fn wall_clock_mode_matches_virtual_results() {
    let mut s = builtin("router", 5);
    s.arrivals.sessions = 30;
    let (virt, _) = run_scenario(&s).unwrap();
    s.clock.mode = scenario::ClockMode::Wall;
    s.clock.time_scale = 0.001;
    let (wall, _) = run_scenario(&s).unwrap();
    assert_eq!(virt.latencies(), wall.latencies());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percentile_matches_rank_oracle(v in prop::collection::vec(0.0f64..1e4, 1..200), p in 0.01f64..=1.0) {
        prop_assert_eq!(percentile(&v, p), rank_oracle(&v, p));
    }

    #[test]
    fn percentiles_are_monotone(v in prop::collection::vec(-1e3f64..1e3, 1..100)) {
        let ps = [0.5, 0.9, 0.95, 0.99, 1.0];
        let xs: Vec<f64> = ps.iter().map(|&p| percentile(&v, p)).collect();
        prop_assert!(xs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(xs[4], v.iter().copied().fold(f64::MIN, f64::max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn requests_are_conserved(which in 0usize..3, seed in 1u64..10_000, sessions in 5u32..40, policy in 0usize..4) {
        let mut s = builtin(BUILTINS[which], seed);
        s.arrivals.sessions = sessions;
        s.policy.names = vec![["fcfs", "hol_migration", "load_balance_routing", "srtf"][policy].to_string()];
        let (m, _) = run_scenario(&s).unwrap();
        prop_assert!(m.violations.is_empty(), "{:?}", m.violations);
        prop_assert_eq!(m.requests, m.completed + m.failed + m.in_flight);
        prop_assert_eq!(m.in_flight, 0);
        prop_assert_eq!(m.latencies().len() as u64, m.completed);
        prop_assert!(m.latencies().iter().all(|&x| x >= 0.0));
        prop_assert!(m.latency.p50 <= m.latency.p95 && m.latency.p95 <= m.latency.p99);
        prop_assert!(m.makespan_ms <= m.end_ms + 1e-9);
    }
}
