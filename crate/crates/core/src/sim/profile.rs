use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ContentDigest, SessionId, SimTime};
use crate::state::KvModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceDist {
    Deterministic {
        ms: f64,
    },
    Exponential {
        mean_ms: f64,
    },
    /// Parameters of the underlying normal, in log-milliseconds.
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    /// `long_ms` with probability `p_long`, otherwise `short_ms`.
    Bimodal {
        p_long: f64,
        short_ms: f64,
        long_ms: f64,
    },
}

impl ServiceDist {
    pub fn mean_ms(&self) -> f64 {
        match *self {
            ServiceDist::Deterministic { ms } => ms,
            ServiceDist::Exponential { mean_ms } => mean_ms,
            ServiceDist::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            ServiceDist::Bimodal {
                p_long,
                short_ms,
                long_ms,
            } => p_long * long_ms + (1.0 - p_long) * short_ms,
        }
    }

    pub fn sample_ms<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ServiceDist::Deterministic { ms } => ms,
            ServiceDist::Exponential { mean_ms } => {
                Exp::new(1.0 / mean_ms).expect("validated").sample(rng)
            }
            ServiceDist::Lognormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
            ServiceDist::Bimodal {
                p_long,
                short_ms,
                long_ms,
            } => {
                if rng.random_bool(p_long) {
                    long_ms
                } else {
                    short_ms
                }
            }
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let ok = match *self {
            ServiceDist::Deterministic { ms } => ms > 0.0 && ms.is_finite(),
            ServiceDist::Exponential { mean_ms } => mean_ms > 0.0 && mean_ms.is_finite(),
            ServiceDist::Lognormal { mu, sigma } => {
                mu.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
            ServiceDist::Bimodal {
                p_long,
                short_ms,
                long_ms,
            } => (0.0..=1.0).contains(&p_long) && short_ms > 0.0 && long_ms > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                path,
                format!("invalid distribution {self:?}"),
            ))
        }
    }
}

/// Latency model standing in for a real agent or tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorProfile {
    pub distribution: ServiceDist,
    #[serde(default = "one")]
    pub slots: u32,
    /// Batch of k takes `base * (1 + alpha * (k - 1))`.
    #[serde(default = "half")]
    pub batch_alpha: f64,
    #[serde(default)]
    pub kv: Option<KvModel>,
}

fn one() -> u32 {
    1
}

fn half() -> f64 {
    0.5
}

impl ExecutorProfile {
    pub fn new(distribution: ServiceDist) -> Self {
        ExecutorProfile {
            distribution,
            slots: 1,
            batch_alpha: 0.5,
            kv: None,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let path = format!("profiles.{name}");
        self.distribution
            .validate(&format!("{path}.distribution"))?;
        if self.slots == 0 {
            return Err(Error::config(format!("{path}.slots"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.batch_alpha) {
            return Err(Error::config(
                format!("{path}.batch_alpha"),
                "must be in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Base service time of one logical call. The stream is keyed by the
    /// call's identity, so it does not depend on where or when it runs.
    pub fn base_service(&self, seed: u64, session: SessionId, label: &str) -> SimTime {
        let key = format!("{seed}/{session}/{label}/svc");
        let mut rng = ChaCha8Rng::seed_from_u64(ContentDigest::of(key.as_bytes()).prefix_u64());
        let ms = self.distribution.sample_ms(&mut rng);
        SimTime::from_millis_f64(ms).max(SimTime(1))
    }

    pub fn batch_time(&self, longest: SimTime, k: usize) -> SimTime {
        let f = 1.0 + self.batch_alpha * (k.saturating_sub(1)) as f64;
        SimTime(((longest.0 as f64) * f).round() as u64).max(SimTime(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_positive_and_reproducible() {
        let p = ExecutorProfile::new(ServiceDist::Exponential { mean_ms: 5.0 });
        for i in 0..200 {
            let label = format!("x{i}");
            let a = p.base_service(3, SessionId(1), &label);
            assert!(a.0 > 0);
            assert_eq!(a, p.base_service(3, SessionId(1), &label));
        }
        assert_ne!(
            p.base_service(3, SessionId(1), "x"),
            p.base_service(4, SessionId(1), "x")
        );
    }

    #[test]
    fn batch_speedup_curve() {
        let p = ExecutorProfile::new(ServiceDist::Deterministic { ms: 10.0 });
        assert_eq!(p.batch_time(SimTime(10_000), 1), SimTime(10_000));
        assert_eq!(p.batch_time(SimTime(10_000), 3), SimTime(20_000));
    }

    #[test]
    fn bimodal_mean() {
        let d = ServiceDist::Bimodal {
            p_long: 0.1,
            short_ms: 1.0,
            long_ms: 91.0,
        };
        assert!((d.mean_ms() - 10.0).abs() < 1e-12);
    }
}
