//! Parameter and KV-cache accounting.
//!
//! Sizes are integers; the KV-cache feasibility test is evaluated with both
//! sides scaled by the GQA group so that no division (and no rounding) takes
//! place.

use serde::{Deserialize, Serialize};

use crate::catalog::{GpuSpec, MoeModelSpec, WorkloadSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSizes {
    /// Attention projections over all layers (`P_a`), bytes.
    pub attention: u64,
    /// One expert's FFN over all layers (`P_e`), bytes.
    pub expert: u64,
}

/// `P_a * g`, exact.
fn attention_params_scaled(model: &MoeModelSpec) -> Option<u128> {
    let h = u128::from(model.hidden);
    let g = u128::from(model.gqa_group);
    u128::from(model.layers)
        .checked_mul(h)?
        .checked_mul(h)?
        .checked_mul(2 * g + 2)?
        .checked_mul(u128::from(model.bytes_per_param))
}

/// Attention weights: QKV projection `h x h(1 + 2/g)` plus output `h x h`
/// per layer. Expert weights: FFN input `h x h'` plus output `h' x h` per layer.
pub fn param_sizes(model: &MoeModelSpec) -> ParamSizes {
    let g = u128::from(model.gqa_group);
    let scaled = attention_params_scaled(model).expect("parameter count fits in u128");
    let attention = scaled.div_ceil(g);
    let expert = 2u128
        * u128::from(model.layers)
        * u128::from(model.hidden)
        * u128::from(model.intermediate)
        * u128::from(model.bytes_per_param);
    ParamSizes {
        attention: u64::try_from(attention).unwrap_or(u64::MAX),
        expert: u64::try_from(expert).unwrap_or(u64::MAX),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// KV cache held by one attention node for `m` micro-batches of `b_a` requests.
    pub kv_bytes: f64,
    pub attn_param_bytes: u64,
    pub expert_param_bytes: u64,
    /// `tp_a * C_a`.
    pub attn_capacity: u64,
    pub attention_fits: bool,
    /// Filled by [`MemoryReport::with_expert`].
    pub expert_fits: Option<bool>,
}

impl MemoryReport {
    /// Adds the expert-node check `tp_e * C_e > P_e`.
    pub fn with_expert(mut self, tp_e: u32, gpu_e: &GpuSpec) -> Self {
        self.expert_fits = Some(expert_fits(self.expert_param_bytes, tp_e, gpu_e));
        self
    }

    pub fn fits(&self) -> bool {
        self.attention_fits && self.expert_fits.unwrap_or(true)
    }
}

pub(crate) fn expert_fits(p_e: u64, tp_e: u32, gpu_e: &GpuSpec) -> bool {
    u128::from(tp_e) * u128::from(gpu_e.mem_capacity) > u128::from(p_e)
}

/// `tp_a * C_a > P_a`, compared exactly with both sides scaled by `g`.
pub(crate) fn attention_params_fit(model: &MoeModelSpec, tp_a: u32, gpu_a: &GpuSpec) -> bool {
    let cap = u128::from(tp_a) * u128::from(gpu_a.mem_capacity) * u128::from(model.gqa_group);
    attention_params_scaled(model).is_some_and(|p| cap > p)
}

/// `2 * bytes * s * h * L` per request, i.e. KV bytes per request times `g`.
fn kv_per_request_scaled(model: &MoeModelSpec, workload: &WorkloadSpec) -> Option<u128> {
    2u128
        .checked_mul(u128::from(model.bytes_per_param))?
        .checked_mul(u128::from(workload.avg_seq_len))?
        .checked_mul(u128::from(model.hidden))?
        .checked_mul(u128::from(model.layers))
}

/// KV-cache capacity check for an attention node: with bf16,
/// `4 * m * b_a * s * h * L / g + P_a < tp_a * C_a`.
pub fn kv_cache_check(
    m: u32,
    b_a: u64,
    model: &MoeModelSpec,
    workload: &WorkloadSpec,
    tp_a: u32,
    gpu_a: &GpuSpec,
) -> Result<MemoryReport> {
    let g = u128::from(model.gqa_group);
    let per_req = kv_per_request_scaled(model, workload).ok_or(Error::Overflow("kv_cache_check"))?;
    let kv_scaled = per_req
        .checked_mul(u128::from(m))
        .and_then(|x| x.checked_mul(u128::from(b_a)))
        .ok_or(Error::Overflow("kv_cache_check"))?;
    let pa_scaled = attention_params_scaled(model).ok_or(Error::Overflow("kv_cache_check"))?;
    let cap = u128::from(tp_a) * u128::from(gpu_a.mem_capacity);
    let lhs = kv_scaled
        .checked_add(pa_scaled)
        .ok_or(Error::Overflow("kv_cache_check"))?;
    let rhs = cap.checked_mul(g).ok_or(Error::Overflow("kv_cache_check"))?;
    let sizes = param_sizes(model);
    Ok(MemoryReport {
        kv_bytes: kv_scaled as f64 / g as f64,
        attn_param_bytes: sizes.attention,
        expert_param_bytes: sizes.expert,
        attn_capacity: u64::try_from(cap).unwrap_or(u64::MAX),
        attention_fits: lhs < rhs,
        expert_fits: None,
    })
}

/// Largest `b_a` for which [`kv_cache_check`] passes with `m` micro-batches;
/// `None` when even `b_a = 0` does not fit.
pub fn max_attention_batch(
    m: u32,
    model: &MoeModelSpec,
    workload: &WorkloadSpec,
    tp_a: u32,
    gpu_a: &GpuSpec,
) -> Option<u64> {
    let g = u128::from(model.gqa_group);
    let rhs = u128::from(tp_a) * u128::from(gpu_a.mem_capacity) * g;
    let pa = attention_params_scaled(model)?;
    if pa >= rhs {
        return None;
    }
    let room = rhs - pa;
    let per_batch = kv_per_request_scaled(model, workload)?.checked_mul(u128::from(m))?;
    if per_batch == 0 {
        return Some(u64::MAX);
    }
    // largest b with b * per_batch < room
    let b = (room - 1) / per_batch;
    Some(u64::try_from(b).unwrap_or(u64::MAX))
}
