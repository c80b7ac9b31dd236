use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::sim::simulate_with_delays;
use super::StageTimes;
use crate::error::{Error, Result};
use crate::perf_model::CommBackend;

/// Standard normal 99th percentile.
const Z_P99: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Independent runs whose totals form the latency distribution.
    pub trials: usize,
    /// Fan-out of each message, for the backend's per-receiver penalty.
    pub receivers: u32,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            trials: 64,
            receivers: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterReport {
    pub backend: String,
    pub seed: u64,
    pub trials: usize,
    pub p50_total: f64,
    pub p99_total: f64,
    pub mean_total: f64,
    /// Percentiles over every micro-batch of every trial.
    pub p50_iter: f64,
    pub p99_iter: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest-rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Repeats the simulation with every message delay set to
/// `(T_c + overhead) * X`, `X` lognormal with median 1 and
/// `p99(X) / p50(X) = jitter_p99_factor`. Deterministic for a given seed.
pub fn simulate_with_jitter_config(
    times: &StageTimes,
    m: u32,
    layers: u32,
    backend: &CommBackend,
    seed: u64,
    config: &JitterConfig,
) -> Result<JitterReport> {
    backend.validate()?;
    if config.trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let sigma = backend.jitter_p99_factor.ln() / Z_P99;
    let noise = LogNormal::new(0.0, sigma).map_err(|e| Error::invalid("jitter", e.to_string()))?;
    let base = times.t_c + backend.message_overhead(config.receivers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = Vec::with_capacity(config.trials);
    let mut iters = Vec::with_capacity(config.trials * m as usize);
    for _ in 0..config.trials {
        let report = simulate_with_delays(times, m, layers, |_, _, _| {
            if sigma == 0.0 {
                base
            } else {
                base * noise.sample(&mut rng)
            }
        })?;
        totals.push(report.total_latency);
        iters.extend_from_slice(&report.iter_latency_per_microbatch);
    }
    let mean_total = totals.iter().sum::<f64>() / totals.len() as f64;
    totals.sort_by(f64::total_cmp);
    iters.sort_by(f64::total_cmp);
    Ok(JitterReport {
        backend: backend.name.clone(),
        seed,
        trials: config.trials,
        p50_total: percentile(&totals, 0.50),
        p99_total: percentile(&totals, 0.99),
        mean_total,
        p50_iter: percentile(&iters, 0.50),
        p99_iter: percentile(&iters, 0.99),
    })
}

pub fn simulate_with_jitter(
    times: &StageTimes,
    m: u32,
    layers: u32,
    backend: &CommBackend,
    seed: u64,
) -> Result<JitterReport> {
    simulate_with_jitter_config(times, m, layers, backend, seed, &JitterConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::simulate;

    #[test]
    fn unit_factor_matches_plain_simulation() {
        let t = StageTimes::new(1.0, 0.9, 0.3).unwrap();
        let r = simulate_with_jitter(&t, 3, 5, &CommBackend::ideal(), 7).unwrap();
        let plain = simulate(&t, 3, 5).unwrap();
        assert_eq!(r.p50_total, plain.total_latency);
        assert_eq!(r.p99_total, plain.total_latency);

        let b = CommBackend {
            jitter_p99_factor: 1.0,
            ..CommBackend::legacy()
        };
        let cfg = JitterConfig::default();
        let r = simulate_with_jitter(&t, 3, 5, &b, 7).unwrap();
        let shifted = StageTimes::new(1.0, 0.9, 0.3 + b.message_overhead(cfg.receivers)).unwrap();
        assert_eq!(r.p50_total, simulate(&shifted, 3, 5).unwrap().total_latency);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let t = StageTimes::new(1.0, 1.0, 0.3).unwrap();
        let a = simulate_with_jitter(&t, 3, 4, &CommBackend::legacy(), 42).unwrap();
        let b = simulate_with_jitter(&t, 3, 4, &CommBackend::legacy(), 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_with_jitter(&t, 3, 4, &CommBackend::legacy(), 43).unwrap();
        assert_ne!(a.p99_total, c.p99_total);
    }

    #[test]
    fn noise_quantile_ratio_matches_factor() {
        let factor: f64 = 3.0;
        let d = LogNormal::new(0.0, factor.ln() / Z_P99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs: Vec<f64> = (0..200_000).map(|_| d.sample(&mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        let ratio = percentile(&xs, 0.99) / percentile(&xs, 0.5);
        assert!((ratio - factor).abs() / factor < 0.03, "{ratio}");
    }

    #[test]
    fn zero_trials_rejected() {
        let t = StageTimes::new(1.0, 1.0, 0.3).unwrap();
        let cfg = JitterConfig {
            trials: 0,
            receivers: 1,
        };
        assert!(simulate_with_jitter_config(&t, 3, 4, &CommBackend::ideal(), 0, &cfg).is_err());
    }
}
