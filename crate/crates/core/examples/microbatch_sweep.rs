//! Throughput against the number of micro-batches for balanced stages.

use moeplan::catalog::{builtin_catalog, builtin_model, SearchLimits, WorkloadSpec};
use moeplan::perf_model::{CommBackend, CostModel};
use moeplan::sweep::{run_sweep, SweepBase, SweepContext, SweepSpec, SweepVariable};

fn main() -> moeplan::Result<()> {
    let model = builtin_model("mixtral")?;
    let catalog = builtin_catalog();
    // balanced at b_a = 256 with n_a = 4: T_a = T_e
    let cm = CostModel::affine(8e-7, 1e-4, 8e-7, 1e-4).with_backend(CommBackend::ideal());
    let (workload, limits) = (WorkloadSpec::default(), SearchLimits::default());
    let ctx = SweepContext {
        model: &model,
        catalog: &catalog,
        costs: &cm,
        workload: &workload,
        limits: &limits,
    };
    let spec = SweepSpec {
        variable: SweepVariable::Microbatches,
        range: (1..=6).map(|m| m.to_string()).collect(),
        fixed: Some(SweepBase {
            gpu_a: "H800".into(),
            gpu_e: "H800".into(),
            tp_a: 4,
            tp_e: 4,
            n_a: 4,
            m: 1,
            b_a: 256,
        }),
    };
    let report = run_sweep(&ctx, &spec)?;
    let mut prev: Option<f64> = None;
    for r in report.evaluated_rows() {
        let t = r.throughput.unwrap_or(0.0);
        let step = prev.map_or_else(String::new, |p| format!("  x{:.2} over m-1", t / p));
        println!(
            "m={}  T_c/T_f={:.2}  tok/s {:>9.0}  normalized {:.2}{step}  {}",
            r.value,
            r.t_c.unwrap_or(0.0) / r.t_a.unwrap_or(1.0).max(r.t_e.unwrap_or(0.0)),
            t,
            r.normalized_throughput.unwrap_or(0.0),
            r.note
        );
        prev = Some(t);
    }
    report.write_csv(std::io::stdout().lock())?;
    Ok(())
}
