mod common;

use agentflow::model::AgentDirectives;
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stateful_sessions_start_in_creation_order(seed in 1u64..1000, policy in 0usize..3, fuzz in any::<bool>()) {
        let policy = ["fcfs", "hol_migration", "srtf"][policy];
        let starts = stateful_order(seed, policy, fuzz).map_err(TestCaseError::fail)?;
        prop_assert!(starts >= 60);
    }

    #[test]
    fn managed_state_excludes_batching(batchable in any::<bool>(), managed in any::<bool>(), stateful in any::<bool>(), max_batch in 1u32..6) {
        let d = AgentDirectives { batchable, managed_state: managed, stateful, max_batch, ..Default::default() };
        batch_exclusion(d).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn instance_counts_stay_within_bounds(min in 1u32..4, extra in 0u32..4, start_off in 0u32..4) {
        instance_bounds(min, min + extra, min + start_off.min(extra)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn running_futures_move_only_through_the_preemption_hook(preemptable in any::<bool>(), delay_ms in 1.0f64..900.0) {
        preemption_gate(preemptable, delay_ms).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn zero_max_and_inverted_bounds_are_rejected() {
    let zero = AgentDirectives {
        max_instances: 0,
        min_instances: 0,
        ..Default::default()
    };
    assert!(zero.validate("a").is_err());
    let inverted = AgentDirectives {
        min_instances: 3,
        max_instances: 2,
        ..Default::default()
    };
    assert!(inverted.validate("a").is_err());
    let no_batch = AgentDirectives {
        batchable: true,
        max_batch: 0,
        ..Default::default()
    };
    assert!(no_batch.validate("a").is_err());
}

#[test]
fn directive_sweep_is_clean() {
    let c = directive_enforcement();
    assert!(c.pass, "{}", c.detail);
}
