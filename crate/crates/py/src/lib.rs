//! Python module `agentflow`.
//!
//! Build with `--features extension-module` and import the resulting shared
//! library as `agentflow`.

use std::sync::Arc;
use std::time::Duration;

use agentflow::model::{Arg, Payload, SessionId, SimTime};
use agentflow::sim::bench::{self, GlobalLoopConfig, TwoLevelConfig};
use agentflow::sim::metrics::RunMetrics;
use agentflow::sim::{MigrationFuzz, RunOptions, Runtime};
use agentflow::workflow::scenario;
use agentflow::workflow::{FutureHandle, ValueResult};
use pyo3::exceptions::{PyRuntimeError, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: agentflow::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "agentflow", from_py_object)]
#[derive(Clone)]
pub struct PyScenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl PyScenario {
    /// One of `financial_analyst`, `router`, `swe`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        scenario::builtin(name)
            .map(|inner| PyScenario { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown builtin `{name}`")))
    }

    #[staticmethod]
    fn builtin_names() -> Vec<&'static str> {
        scenario::BUILTIN_NAMES.to_vec()
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        scenario::Scenario::from_toml(text)
            .map(|inner| PyScenario { inner })
            .map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.workflow.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn sessions(&self) -> u32 {
        self.inner.arrivals.sessions
    }

    #[setter]
    fn set_sessions(&mut self, n: u32) {
        self.inner.arrivals.sessions = n;
    }

    #[getter]
    fn policy(&self) -> Vec<String> {
        self.inner.policy.names.clone()
    }

    #[setter]
    fn set_policy(&mut self, names: Vec<String>) -> PyResult<()> {
        let mut s = self.inner.clone();
        s.policy.names = names;
        s.validate().map_err(value_err)?;
        self.inner = s;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario({}, seed={}, sessions={}, policy={})",
            self.inner.workflow.name,
            self.inner.seed,
            self.inner.arrivals.sessions,
            self.inner.policy.names.join("+")
        )
    }
}

/// Aggregates of one run.
#[pyclass(name = "RunMetrics", module = "agentflow", frozen)]
pub struct PyRunMetrics {
    inner: RunMetrics,
    events: String,
}

#[pymethods]
impl PyRunMetrics {
    #[getter]
    fn requests(&self) -> u64 {
        self.inner.requests
    }
    #[getter]
    fn completed(&self) -> u64 {
        self.inner.completed
    }
    #[getter]
    fn failed(&self) -> u64 {
        self.inner.failed
    }
    #[getter]
    fn in_flight(&self) -> u64 {
        self.inner.in_flight
    }
    #[getter]
    fn mean_ms(&self) -> f64 {
        self.inner.latency.mean
    }
    #[getter]
    fn p50_ms(&self) -> f64 {
        self.inner.latency.p50
    }
    #[getter]
    fn p95_ms(&self) -> f64 {
        self.inner.latency.p95
    }
    #[getter]
    fn p99_ms(&self) -> f64 {
        self.inner.latency.p99
    }
    #[getter]
    fn makespan_ms(&self) -> f64 {
        self.inner.makespan_ms
    }
    #[getter]
    fn imbalance_index(&self) -> f64 {
        self.inner.imbalance_index
    }
    #[getter]
    fn migrations(&self) -> u64 {
        self.inner.migrations
    }
    #[getter]
    fn violations(&self) -> Vec<String> {
        self.inner.violations.clone()
    }

    /// Successful request latencies in completion order.
    fn latencies(&self) -> Vec<f64> {
        self.inner.latencies()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// The run's event log, one record per line.
    fn event_log(&self) -> String {
        self.events.clone()
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        format!(
            "RunMetrics(requests={}, completed={}, failed={}, mean_ms={:.3}, p99_ms={:.3})",
            m.requests, m.completed, m.failed, m.latency.mean, m.latency.p99
        )
    }
}

fn metrics((inner, log): (RunMetrics, agentflow::eventlog::EventLog)) -> PyRunMetrics {
    PyRunMetrics {
        inner,
        events: log.to_text(),
    }
}

/// Runs a scenario to completion. `fuzz_seed` injects random migrations;
/// `no_global` disables the global controller.
#[pyfunction]
#[pyo3(signature = (scenario, fuzz_seed=None, no_global=false))]
fn run_scenario(
    py: Python<'_>,
    scenario: PyScenario,
    fuzz_seed: Option<u64>,
    no_global: bool,
) -> PyResult<PyRunMetrics> {
    let opts = RunOptions {
        fuzz: fuzz_seed.map(|seed| MigrationFuzz { seed, per_tick: 2 }),
        no_global,
    };
    py.detach(|| agentflow::sim::run_scenario_with(&scenario.inner, opts))
        .map(metrics)
        .map_err(value_err)
}

/// Handle to a future created through a `Simulation`.
#[pyclass(name = "Future", module = "agentflow", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyFuture {
    inner: FutureHandle,
}

#[pymethods]
impl PyFuture {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.to_string()
    }

    #[getter]
    fn session(&self) -> u64 {
        self.inner.session.0
    }

    fn __repr__(&self) -> String {
        format!(
            "Future({}, session={})",
            self.inner.id, self.inner.session.0
        )
    }
}

/// An interactive simulation: create futures, advance virtual time, read
/// values.
#[pyclass(name = "Simulation", module = "agentflow", unsendable)]
pub struct PySimulation {
    rt: Option<Runtime>,
}

impl PySimulation {
    fn rt(&mut self) -> PyResult<&mut Runtime> {
        self.rt
            .as_mut()
            .ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))
    }
}

fn to_arg(item: &Bound<'_, PyAny>) -> PyResult<Arg> {
    if let Ok(f) = item.cast::<PyFuture>() {
        return Ok(Arg::Future(f.get().inner.id));
    }
    if let Ok(b) = item.cast::<PyBytes>() {
        return Ok(Arg::Value(Payload::new(b.as_bytes().to_vec())));
    }
    if let Ok(s) = item.extract::<String>() {
        return Ok(Arg::Value(Payload::text(s)));
    }
    Err(PyValueError::new_err(
        "arguments must be bytes, str or Future",
    ))
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(scenario: PyScenario) -> PyResult<Self> {
        Ok(PySimulation {
            rt: Some(Runtime::new(scenario.inner).map_err(value_err)?),
        })
    }

    /// Current virtual time in milliseconds.
    #[getter]
    fn now_ms(&self) -> f64 {
        self.rt.as_ref().map_or(0.0, |r| r.now().as_millis_f64())
    }

    fn new_session(&mut self) -> PyResult<u64> {
        Ok(self.rt()?.new_session().0)
    }

    /// Creates a future for `agent.method`; never blocks.
    #[pyo3(signature = (session, agent, method, args=Vec::new(), label="call"))]
    fn invoke(
        &mut self,
        session: u64,
        agent: &str,
        method: &str,
        args: Vec<Bound<'_, PyAny>>,
        label: &str,
    ) -> PyResult<PyFuture> {
        let args = args.iter().map(to_arg).collect::<PyResult<Vec<_>>>()?;
        let h = self
            .rt()?
            .invoke(SessionId(session), agent, method, args, label)
            .map_err(value_err)?;
        Ok(PyFuture { inner: h })
    }

    /// Starts one request of the scenario's workflow.
    #[pyo3(signature = (session, input=None))]
    fn run_workflow(&mut self, session: u64, input: Option<Vec<u8>>) -> PyResult<PyFuture> {
        let rt = self.rt()?;
        let program = Arc::new(rt.scenario().workflow.program());
        let h = rt
            .run_workflow(program, SessionId(session), input.map(Payload::new))
            .map_err(value_err)?;
        Ok(PyFuture { inner: h })
    }

    fn available(&mut self, future: &PyFuture) -> PyResult<bool> {
        Ok(self.rt()?.available(&future.inner))
    }

    /// Advances virtual time until the value arrives or `timeout_ms` passes.
    #[pyo3(signature = (future, timeout_ms=60_000.0))]
    fn value<'py>(
        &mut self,
        py: Python<'py>,
        future: &PyFuture,
        timeout_ms: f64,
    ) -> PyResult<Bound<'py, PyBytes>> {
        match self
            .rt()?
            .value(&future.inner, SimTime::from_millis_f64(timeout_ms))
        {
            ValueResult::Value(v) => Ok(PyBytes::new(py, v.as_bytes())),
            ValueResult::Failure(f) => Err(PyRuntimeError::new_err(f.message)),
            ValueResult::Timeout => Err(PyTimeoutError::new_err(format!(
                "{} not ready",
                future.inner.id
            ))),
        }
    }

    fn run_until(&mut self, ms: f64) -> PyResult<()> {
        self.rt()?.run_until(SimTime::from_millis_f64(ms));
        Ok(())
    }

    /// Runs the scenario's own arrivals to completion and reports.
    fn run(&mut self) -> PyResult<PyRunMetrics> {
        let mut rt = self
            .rt
            .take()
            .ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))?;
        rt.schedule_arrivals();
        rt.run_to_end();
        Ok(metrics(rt.finish()))
    }

    /// Drains outstanding work and reports.
    fn finish(&mut self) -> PyResult<PyRunMetrics> {
        let mut rt = self
            .rt
            .take()
            .ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))?;
        rt.run_to_end();
        Ok(metrics(rt.finish()))
    }
}

/// Rows of `(n_futures, one_level_ms, two_level_ms)`.
#[pyfunction]
#[pyo3(signature = (sizes, controllers=8, instances=16))]
fn bench_two_level(
    py: Python<'_>,
    sizes: Vec<usize>,
    controllers: usize,
    instances: u32,
) -> Vec<(usize, f64, f64)> {
    let cfg = TwoLevelConfig {
        controllers,
        instances,
    };
    py.detach(|| bench::bench_two_level(&sizes, cfg))
        .into_iter()
        .map(|r| (r.n_futures, r.one_level_ms, r.two_level_ms))
        .collect()
}

/// Rows of `(n_nodes, n_futures, collect_ms, decide_ms, push_ms, total_ms)`.
#[pyfunction]
#[pyo3(signature = (sizes, nodes, rtt_ms=5.0, reps=3))]
fn bench_global_loop(
    py: Python<'_>,
    sizes: Vec<usize>,
    nodes: Vec<usize>,
    rtt_ms: f64,
    reps: usize,
) -> Vec<(usize, usize, f64, f64, f64, f64)> {
    let cfg = GlobalLoopConfig {
        rpc_rtt: Duration::from_secs_f64(rtt_ms.max(0.0) / 1000.0),
        reps,
        ..Default::default()
    };
    py.detach(|| bench::bench_global_loop(&sizes, &nodes, cfg))
        .into_iter()
        .map(|r| {
            (
                r.n_nodes,
                r.n_futures,
                r.collect_ms,
                r.decide_ms,
                r.push_ms,
                r.total_ms,
            )
        })
        .collect()
}

/// Nearest-rank percentile, `p` in (0, 1].
#[pyfunction]
fn percentile(samples: Vec<f64>, p: f64) -> f64 {
    agentflow::sim::metrics::percentile(&samples, p)
}

#[pymodule]
#[pyo3(name = "agentflow")]
fn agentflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunMetrics>()?;
    m.add_class::<PyFuture>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(bench_two_level, m)?)?;
    m.add_function(wrap_pyfunction!(bench_global_loop, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    Ok(())
}
