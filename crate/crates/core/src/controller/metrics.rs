use crate::model::SimTime;

const RESERVOIR: usize = 1024;

/// Serving-time telemetry of one instance.
///
/// Busy time integrates the number of occupied execution slots; occupancy
/// integrates queued + running futures. Both are in slot-microseconds.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    pub slots: u32,
    pub alive_since: SimTime,
    /// Set when the instance terminates.
    pub ended: Option<SimTime>,
    pub queue_len: usize,
    pub waiting: usize,
    pub running: usize,
    pub busy_slots: u32,
    pub busy_us: u128,
    pub occupancy_us: u128,
    pub completed: u64,
    pub failed: u64,
    pub latency_sum_ms: f64,
    latencies: Vec<f64>,
    pub service_sum_ms: f64,
    pub service_count: u64,
    pub batches: u64,
    pub batched_futures: u64,
    last_change: SimTime,
}

impl MetricsAccumulator {
    pub fn new(slots: u32, now: SimTime) -> Self {
        MetricsAccumulator {
            slots,
            alive_since: now,
            ended: None,
            queue_len: 0,
            waiting: 0,
            running: 0,
            busy_slots: 0,
            busy_us: 0,
            occupancy_us: 0,
            completed: 0,
            failed: 0,
            latency_sum_ms: 0.0,
            latencies: Vec::new(),
            service_sum_ms: 0.0,
            service_count: 0,
            batches: 0,
            batched_futures: 0,
            last_change: now,
        }
    }

    /// Integrates up to `now`; call before any gauge changes.
    pub fn advance(&mut self, now: SimTime) {
        let dt = now.0.saturating_sub(self.last_change.0) as u128;
        self.busy_us += dt * self.busy_slots as u128;
        self.occupancy_us += dt * (self.queue_len + self.running) as u128;
        self.last_change = self.last_change.max(now);
    }

    pub fn record_latency(&mut self, ms: f64) {
        self.completed += 1;
        self.latency_sum_ms += ms;
        if self.latencies.len() < RESERVOIR {
            self.latencies.push(ms);
        } else {
            // deterministic replacement keeps the reservoir reproducible
            let slot = (self.completed as usize * 2_654_435_761usize) % RESERVOIR;
            self.latencies[slot] = ms;
        }
    }

    pub fn record_service(&mut self, ms: f64) {
        self.service_sum_ms += ms;
        self.service_count += 1;
    }

    pub fn record_batch(&mut self, size: usize) {
        self.batches += 1;
        self.batched_futures += size as u64;
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.completed == 0 {
            0.0
        } else {
            self.latency_sum_ms / self.completed as f64
        }
    }

    pub fn mean_service_ms(&self) -> f64 {
        if self.service_count == 0 {
            0.0
        } else {
            self.service_sum_ms / self.service_count as f64
        }
    }

    pub fn latency_sample(&self) -> &[f64] {
        &self.latencies
    }

    /// Busy fraction of the slots since `alive_since`.
    pub fn utilization(&self, now: SimTime) -> f64 {
        let span = now.0.saturating_sub(self.alive_since.0) as f64 * self.slots.max(1) as f64;
        if span == 0.0 {
            0.0
        } else {
            self.busy_us as f64 / span
        }
    }
}
