//! Throughput and latency against the number of attention nodes.

use moeplan::catalog::{builtin_catalog, builtin_model, SearchLimits, WorkloadSpec};
use moeplan::perf_model::{CommBackend, CostModel};
use moeplan::planner::balance_attention_nodes;
use moeplan::sweep::{run_sweep, SweepBase, SweepContext, SweepSpec, SweepVariable};

fn main() -> moeplan::Result<()> {
    let model = builtin_model("mixtral")?;
    let catalog = builtin_catalog();
    let cm = CostModel::affine(4e-7, 5e-5, 1e-7, 5e-5).with_backend(CommBackend::ideal());
    let n_star = balance_attention_nodes(&cm, model.experts, model.topk);
    let (workload, limits) = (WorkloadSpec::default(), SearchLimits::default());
    let ctx = SweepContext {
        model: &model,
        catalog: &catalog,
        costs: &cm,
        workload: &workload,
        limits: &limits,
    };
    let spec = SweepSpec {
        variable: SweepVariable::DpDegree,
        range: (1..=2 * n_star).map(|n| n.to_string()).collect(),
        fixed: Some(SweepBase {
            gpu_a: "H800".into(),
            gpu_e: "H800".into(),
            tp_a: 8,
            tp_e: 8,
            n_a: 1,
            m: 3,
            b_a: 128,
        }),
    };
    println!("balance point n_a = {n_star}");
    for r in run_sweep(&ctx, &spec)?.evaluated_rows() {
        println!(
            "n_a={:>2}  T_a {:.1} us  T_e {:.1} us  T_c {:.1} us  tok/s {:>9.0}  per GPU {:>7.1}  T_iter {:.3} ms",
            r.value,
            r.t_a.unwrap_or(0.0) * 1e6,
            r.t_e.unwrap_or(0.0) * 1e6,
            r.t_c.unwrap_or(0.0) * 1e6,
            r.throughput.unwrap_or(0.0),
            r.throughput_per_gpu.unwrap_or(0.0),
            r.iter_latency.unwrap_or(0.0) * 1e3
        );
    }
    Ok(())
}
