//! Tail latency of the pipeline under a tight and a jittery communication backend.

use moeplan::perf_model::CommBackend;
use moeplan::pipeline::{simulate_with_jitter, StageTimes};

fn main() -> moeplan::Result<()> {
    let times = StageTimes::new(300e-6, 280e-6, 90e-6)?;
    let (m, layers) = (3, 56);
    for backend in [CommBackend::ideal(), CommBackend::optimized(), CommBackend::legacy()] {
        let mut p50 = Vec::new();
        let mut p99 = Vec::new();
        for seed in 0..20 {
            let r = simulate_with_jitter(&times, m, layers, &backend, seed)?;
            p50.push(r.p50_total);
            p99.push(r.p99_total);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:<9} overhead {:>5.1} us  jitter x{:.1}: p50 {:.3} ms  p99 {:.3} ms",
            backend.name,
            backend.message_overhead(8) * 1e6,
            backend.jitter_p99_factor,
            mean(&p50) * 1e3,
            mean(&p99) * 1e3
        );
    }
    Ok(())
}
