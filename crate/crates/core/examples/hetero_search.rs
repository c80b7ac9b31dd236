//! Ranks every (attention GPU, expert GPU) pair for Mixtral under both cost metrics.

use moeplan::catalog::{builtin_catalog, builtin_model, CostMetric, SearchLimits, WorkloadSpec};
use moeplan::perf_model::RooflineOracle;
use moeplan::planner::hetero_search;

fn main() -> moeplan::Result<()> {
    let model = builtin_model("mixtral")?;
    let catalog = builtin_catalog();
    let costs = RooflineOracle::default();
    let workload = WorkloadSpec::default();
    for metric in [CostMetric::Price, CostMetric::Power] {
        let limits = SearchLimits {
            cost_metric: metric,
            ..SearchLimits::default()
        };
        let outcome = hetero_search(&model, &catalog, &costs, &workload, &limits)?;
        println!("ranked by throughput per unit {metric}:");
        for (i, r) in outcome.ranked.iter().take(6).enumerate() {
            let p = r.plan.as_ref().expect("ranked pairs have plans");
            println!(
                "  {:>2}. {:<5} -> {:<5} tpuc {:>9.2}  {} GPUs",
                i + 1,
                r.gpu_a,
                r.gpu_e,
                p.tpuc,
                p.total_gpus
            );
        }
        if let (Some(fwd), Some(rev)) = (outcome.position("H20", "L40S"), outcome.position("L40S", "H20")) {
            println!(
                "  H20 attention with L40S experts is #{}, the swap is #{}",
                fwd + 1,
                rev + 1
            );
        }
        println!(
            "  {} pairs infeasible, {} excluded\n",
            outcome.infeasible.len(),
            outcome.excluded.len()
        );
    }
    Ok(())
}
