"""Smoke test for the agentflow Python module.

Build and run:

    cargo build --release -p agentflow-py --features extension-module
    cp target/release/libagentflow_py.so python/agentflow.so
    python3 python/smoke.py
"""

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import agentflow  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    names = agentflow.Scenario.builtin_names()
    check(set(names) == {"financial_analyst", "router", "swe"}, "builtins listed")

    s = agentflow.Scenario.builtin("swe")
    s.sessions = 10
    m = agentflow.run_scenario(s)
    check(m.requests == 10, "swe run injects 10 requests")
    check(m.completed + m.failed + m.in_flight == m.requests, "conservation")
    check(not m.violations, "no invariant violations")
    check(json.loads(m.to_json())["requests"] == 10, "metrics json")

    again = agentflow.run_scenario(agentflow.Scenario.from_toml(s.to_toml()))
    check(again.event_log() == m.event_log(), "toml round trip replays identically")

    fuzzed = agentflow.run_scenario(s, fuzz_seed=7)
    check(fuzzed.completed == m.completed, "migration fuzz keeps outcomes")

    check(agentflow.percentile([float(x) for x in range(1, 101)], 0.99) == 99.0, "nearest-rank p99")

    sim = agentflow.Simulation(agentflow.Scenario.builtin("router"))
    session = sim.new_session()
    f = sim.invoke(session, "classifier", "classify", [b"hello"], label="kind")
    check(not sim.available(f), "invoke does not block")
    out = sim.value(f, timeout_ms=10_000.0)
    check(isinstance(out, bytes) and sim.now_ms > 0, "value advances virtual time")
    wf = sim.run_workflow(sim.new_session(), b"question")
    check(len(sim.value(wf)) > 0, "workflow result")
    try:
        sim.value(sim.invoke(session, "classifier", "classify", [b"x"]), timeout_ms=0.0)
        check(False, "zero timeout raises")
    except TimeoutError:
        check(True, "zero timeout raises")
    done = sim.finish()
    check(not done.violations, "interactive run is clean")

    rows = agentflow.bench_two_level([256, 512])
    check(len(rows) == 2 and all(r[1] > 0 for r in rows), "two-level bench rows")
    rows = agentflow.bench_global_loop([256], [2], rtt_ms=0.0, reps=1)
    check(rows[0][:2] == (2, 256), "global loop bench row")
    print("all python smoke checks passed")


if __name__ == "__main__":
    main()
