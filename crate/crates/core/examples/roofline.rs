//! Where a dense and an MoE FFN become compute-bound on each catalog GPU.

use moeplan::catalog::{builtin_catalog, builtin_models, GpuSpec, GB, TFLOPS};
use moeplan::perf_model::{ffn_utilization, min_compute_bound_batch, pair_message_bytes};

fn main() {
    let reference = GpuSpec {
        name: "312 TFLOPS / 2 TB/s".into(),
        price: 1.0,
        mem_capacity: 80_000_000_000,
        mem_bandwidth: 2000.0 * GB,
        compute: 312.0 * TFLOPS,
        net_bandwidth_per_gpu: 25.0 * GB,
        max_power: None,
        max_gpus_per_node: 8,
    };
    let b = min_compute_bound_batch(&reference);
    println!(
        "{}: compute-bound from batch {b}; an 8-expert top-2 FFN at that batch runs at {:.0}% utilization",
        reference.name,
        100.0 * ffn_utilization(b as f64, &reference, Some((2, 8)))
    );

    println!(
        "\n{:<6} {:>10} {:>14} {:>14}",
        "GPU", "min batch", "dense util@64", "MoE util@156"
    );
    for gpu in &builtin_catalog() {
        println!(
            "{:<6} {:>10} {:>14.3} {:>14.3}",
            gpu.name,
            min_compute_bound_batch(gpu),
            ffn_utilization(64.0, gpu, None),
            ffn_utilization(156.0, gpu, Some((2, 8)))
        );
    }

    println!("\nper sender-receiver message at attention micro-batch 128:");
    for model in builtin_models() {
        for tp_a in [1, 2, 4] {
            println!(
                "  {:<14} tp_a={tp_a}: {:>9} bytes",
                model.name,
                pair_message_bytes(128, &model, tp_a)
            );
        }
    }
}
