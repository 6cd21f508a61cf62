//! Run-level metrics and their exports.
//!
//! Percentiles use the nearest-rank method: the p-th percentile of n
//! sorted samples is the ⌈p·n⌉-th smallest.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{Location, SessionId};

pub const SCHEMA_VERSION: u32 = 1;

/// Nearest-rank percentile of unsorted samples; `p` in (0, 1].
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    nearest_rank(&v, p)
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// `(max - min) / mean`, or 0 for an empty or all-zero series.
pub fn imbalance_index(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    (max - min) / mean
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        LatencyStats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 0.50),
            p95: nearest_rank(&v, 0.95),
            p99: nearest_rank(&v, 0.99),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLatency {
    pub session: SessionId,
    pub request: u32,
    pub start_ms: f64,
    pub end_ms: f64,
    pub ok: bool,
    pub digest: String,
}

impl RequestLatency {
    pub fn latency_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub location: Location,
    pub node: u32,
    pub live_at_end: bool,
    pub alive_ms: f64,
    pub busy_ms: f64,
    pub utilization: f64,
    pub completed: u64,
    pub failed: u64,
    pub mean_batch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub time_ms: f64,
    pub location: Location,
    pub queue_len: usize,
    pub running: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: u32,
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    pub in_flight: u64,
    pub latency: LatencyStats,
    pub makespan_ms: f64,
    pub end_ms: f64,
    /// Over the utilization of instances live at the end of the run.
    pub imbalance_index: f64,
    pub migrations: u64,
    pub migration_rejects: u64,
    pub session_reentries: u64,
    pub commands: BTreeMap<String, u64>,
    pub provisions: u64,
    pub kills: u64,
    pub lifecycle_rejects: u64,
    pub ticks: u64,
    pub events: usize,
    pub instances: Vec<InstanceStats>,
    pub violations: Vec<String>,
    #[serde(skip)]
    pub series: Vec<RequestLatency>,
    #[serde(skip)]
    pub timeline: Vec<TimelinePoint>,
}

impl RunMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn latencies(&self) -> Vec<f64> {
        self.series
            .iter()
            .filter(|r| r.ok)
            .map(|r| r.latency_ms())
            .collect()
    }

    pub fn write_latency_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "session",
            "request",
            "start_ms",
            "end_ms",
            "latency_ms",
            "ok",
            "digest",
        ])?;
        for r in &self.series {
            c.write_record([
                r.session.to_string(),
                r.request.to_string(),
                format!("{:.3}", r.start_ms),
                format!("{:.3}", r.end_ms),
                format!("{:.3}", r.latency_ms()),
                r.ok.to_string(),
                r.digest.clone(),
            ])?;
        }
        c.flush()
    }

    pub fn write_timeline_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["time_ms", "instance", "queue_len", "running"])?;
        for p in &self.timeline {
            c.write_record([
                format!("{:.3}", p.time_ms),
                p.location.to_string(),
                p.queue_len.to_string(),
                p.running.to_string(),
            ])?;
        }
        c.flush()
    }

    pub fn write_instances_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "instance",
            "node",
            "live_at_end",
            "alive_ms",
            "busy_ms",
            "utilization",
            "completed",
            "failed",
            "mean_batch",
        ])?;
        for i in &self.instances {
            c.write_record([
                i.location.to_string(),
                i.node.to_string(),
                i.live_at_end.to_string(),
                format!("{:.3}", i.alive_ms),
                format!("{:.3}", i.busy_ms),
                format!("{:.6}", i.utilization),
                i.completed.to_string(),
                i.failed.to_string(),
                format!("{:.3}", i.mean_batch),
            ])?;
        }
        c.flush()
    }

    /// Mean queue length per instance over the recorded timeline.
    pub fn mean_queue_by_type(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for p in &self.timeline {
            let e = acc.entry(p.location.agent_type.clone()).or_default();
            e.0 += p.queue_len as f64;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n.max(1) as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 0.50), 50.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
        let s = LatencyStats::of(&v);
        assert_eq!((s.p50, s.p95, s.p99, s.max), (50.0, 95.0, 99.0, 100.0));
    }

    #[test]
    fn imbalance_of_equal_values_is_zero() {
        assert_eq!(imbalance_index(&[3.0, 3.0, 3.0]), 0.0);
        assert_eq!(imbalance_index(&[1.0, 3.0]), 1.0);
        assert_eq!(imbalance_index(&[]), 0.0);
    }
}
