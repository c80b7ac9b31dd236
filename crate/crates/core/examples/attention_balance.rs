//! Packs decoding requests of mixed context lengths onto attention nodes.

use moeplan::balance::{compose_attention_batches, Request};
use moeplan::perf_model::CostModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> moeplan::Result<()> {
    // k1 = alpha * s + beta: a 2048-token context costs about 4x a 256-token one
    let cm = CostModel {
        alpha: 2e-10,
        beta: 1e-7,
        ..CostModel::affine(2e-7, 4e-5, 1e-7, 4e-5)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let requests: Vec<Request> = (0..200)
        .map(|id| Request {
            id,
            seq_len: rng.random_range(128..4096),
        })
        .collect();
    let n_a = 6;
    let total: f64 = requests.iter().map(|r| cm.request_cost(f64::from(r.seq_len))).sum();
    let target = cm.k2 + total / n_a as f64;
    let plan = compose_attention_batches(&requests, n_a, &cm, target)?;
    println!("target {:.1} us per node", target * 1e6);
    for (j, n) in plan.nodes.iter().enumerate() {
        println!(
            "  node {j}: {:>3} requests, {:.1} us",
            n.requests.len(),
            n.predicted_time * 1e6
        );
    }
    println!("max/min spread {:.4}", plan.spread());
    Ok(())
}
