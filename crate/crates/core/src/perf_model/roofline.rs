use crate::catalog::GpuSpec;
use crate::error::{Error, Result};

/// FLOPs of a `(b x h_in) * (h_in x h_out)` GEMM: `2 * b * h_in * h_out`.
pub fn gemm_flops(b: u64, h_in: u64, h_out: u64) -> Result<u128> {
    if b == 0 || h_in == 0 || h_out == 0 {
        return Err(Error::invalid("gemm_flops", "dimensions must be > 0"));
    }
    2u128
        .checked_mul(u128::from(b))
        .and_then(|x| x.checked_mul(u128::from(h_in)))
        .and_then(|x| x.checked_mul(u128::from(h_out)))
        .ok_or(Error::Overflow("gemm_flops"))
}

/// Smallest token batch at which a bf16 GEMM stops being memory-bound: `ceil(F / BW)`.
pub fn min_compute_bound_batch(gpu: &GpuSpec) -> u64 {
    let ratio = gpu.compute / gpu.mem_bandwidth;
    (ratio.ceil() as u64).max(1)
}

/// Theoretical FFN utilization `min(b * BW / F, 1)`, scaled by `K / E` for MoE.
pub fn ffn_utilization(b: f64, gpu: &GpuSpec, moe: Option<(u32, u32)>) -> f64 {
    let share = match moe {
        Some((k, e)) => f64::from(k) / f64::from(e),
        None => 1.0,
    };
    (share * b * gpu.mem_bandwidth / gpu.compute).clamp(0.0, 1.0)
}
