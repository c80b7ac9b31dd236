//! Homogeneous plan search for every builtin model on every catalog GPU.

use moeplan::catalog::{builtin_catalog, builtin_models, SearchLimits, WorkloadSpec};
use moeplan::perf_model::RooflineOracle;
use moeplan::planner::search;

fn main() -> moeplan::Result<()> {
    let catalog = builtin_catalog();
    let costs = RooflineOracle::default();
    let workload = WorkloadSpec::default();
    let limits = SearchLimits::default();
    for model in builtin_models() {
        println!("{}", model.name);
        for gpu in &catalog {
            let outcome = search(&model, gpu, gpu, &costs, &workload, &limits)?;
            match &outcome.best {
                Some(p) => println!(
                    "  {:<5} tp_a={} tp_e={} n_a={:<3} m={} batch={:<6} {:>5} GPUs  tpuc {:>8.1}  ({})",
                    gpu.name, p.tp_a, p.tp_e, p.n_a, p.m, p.batch, p.total_gpus, p.tpuc, p.batch_limit
                ),
                None => println!(
                    "  {:<5} infeasible: {}",
                    gpu.name,
                    outcome
                        .dominant_binding()
                        .map_or_else(|| "no candidates".to_string(), |b| b.to_string())
                ),
            }
        }
    }
    Ok(())
}
