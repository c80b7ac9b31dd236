//! Expert placement in all three modes on a skewed load trace.

use moeplan::balance::{balance_experts, load_trace, BalanceMode, PlacementReport};

fn main() -> moeplan::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/expert_loads.csv");
    let trace = load_trace(path)?;
    let loads = trace.total();
    println!("loads per expert: {loads:?}");
    for k_cold in [0.0, 600.0] {
        for mode in [
            BalanceMode::Integral,
            BalanceMode::Replicated { max_replicas: 2 },
            BalanceMode::Fractional,
        ] {
            let report = PlacementReport::new(balance_experts(&loads, 6, k_cold, mode)?, &loads, k_cold);
            println!(
                "K_cold={k_cold:<5} {mode:<14} C_max {:>7.1}  lower bound {:>7.1}  imbalance {:.3}  replicas {:?}",
                report.c_max,
                report.average,
                report.imbalance,
                report.placement.replicas()
            );
        }
    }
    Ok(())
}
