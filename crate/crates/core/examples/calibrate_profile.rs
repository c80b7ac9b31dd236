//! Fits the cost model to measured kernel timings, then plans with it.

use moeplan::catalog::{builtin_catalog, builtin_model, SearchLimits, WorkloadSpec};
use moeplan::perf_model::{load_profile, CommBackend};
use moeplan::planner::search;

fn main() -> moeplan::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/profile_h20_l40s.csv");
    let (cm, attn, expert) = load_profile(path)?.cost_model(CommBackend::optimized())?;
    println!(
        "attention: k1 = {:.4e} s/token, k2 = {:.4e} s, rms residual {:.2e} s over {} points",
        attn.slope, attn.intercept, attn.rms_residual, attn.points
    );
    println!(
        "expert:    k3 = {:.4e} s/token, k4 = {:.4e} s, rms residual {:.2e} s over {} points",
        expert.slope, expert.intercept, expert.rms_residual, expert.points
    );
    println!("T_a(256) = {:.1} us", (cm.k1 * 256.0 + cm.k2) * 1e6);

    let catalog = builtin_catalog();
    let model = builtin_model("mixtral")?;
    let outcome = search(
        &model,
        &catalog["H20"],
        &catalog["L40S"],
        &cm,
        &WorkloadSpec::default(),
        &SearchLimits::default(),
    )?;
    match outcome.best {
        Some(p) => println!("plan: n_a={} m={} batch={} tpuc {:.1}", p.n_a, p.m, p.batch, p.tpuc),
        None => println!("no feasible plan: {:?}", outcome.dominant_binding()),
    }
    Ok(())
}
