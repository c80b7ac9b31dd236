//! Loads a JSON config with a custom model and hardware list and plans on it.
//!
//! Pass a path as the first argument, or set MOEPLAN_CONFIG.

use moeplan::catalog::load_config_file;
use moeplan::perf_model::RooflineOracle;
use moeplan::planner::hetero_search;

fn main() -> moeplan::Result<()> {
    let path = std::env::args()
        .nth(1)
        .or_else(|| std::env::var(moeplan::cli::CONFIG_ENV).ok())
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/custom_cluster.json").into());
    let cfg = load_config_file(&path)?;
    println!(
        "{}: {} layers, {} experts (top-{}), SLO {} s, {} GPU types",
        cfg.model.name,
        cfg.model.layers,
        cfg.model.experts,
        cfg.model.topk,
        cfg.workload.slo_tbt,
        cfg.hardware.len()
    );
    let outcome = hetero_search(
        &cfg.model,
        &cfg.hardware,
        &RooflineOracle::default(),
        &cfg.workload,
        &cfg.limits,
    )?;
    for r in &outcome.ranked {
        let p = r.plan.as_ref().expect("ranked pairs have plans");
        println!(
            "  {} -> {}: tpuc {:.1}, {} GPUs",
            r.gpu_a, r.gpu_e, p.tpuc, p.total_gpus
        );
    }
    println!("\nresolved config:\n{}", cfg.to_json());
    Ok(())
}
