//! Brute-force planner written from the constraint definitions, sharing
//! nothing with the library search beyond the calibrated cost model and the
//! communication formula.
#![allow(dead_code)]

use moeplan::catalog::{CostMetric, GpuSpec, MoeModelSpec, SearchLimits, WorkloadSpec};
use moeplan::perf_model::{comm_time, CommShape, CostModel, CostSource};

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePlan {
    pub tp_a: u32,
    pub tp_e: u32,
    pub n_a: u32,
    pub m: u32,
    pub batch: u64,
    pub t_a: f64,
    pub t_e: f64,
    pub t_c: f64,
    pub total_gpus: u64,
    pub tpuc: f64,
}

/// `P_a * g` in bytes: QKV `h x h(1 + 2/g)` plus output `h x h`, every layer.
pub fn attention_params_times_g(model: &MoeModelSpec) -> u128 {
    let (l, h, g, bpp) = dims(model);
    l * h * h * (2 * g + 2) * bpp
}

/// `P_e` in bytes: two `h x h'` GEMMs per layer.
pub fn expert_params(model: &MoeModelSpec) -> u128 {
    let (l, h, _, bpp) = dims(model);
    2 * l * h * u128::from(model.intermediate) * bpp
}

fn dims(model: &MoeModelSpec) -> (u128, u128, u128, u128) {
    (
        u128::from(model.layers),
        u128::from(model.hidden),
        u128::from(model.gqa_group),
        u128::from(model.bytes_per_param),
    )
}

/// `2 * bytes * m * b_a * s * h * L / g + P_a < tp_a * C_a`, scaled by `g`.
pub fn kv_fits(m: u32, b_a: u64, model: &MoeModelSpec, s: u32, tp_a: u32, gpu: &GpuSpec) -> bool {
    let (l, h, g, bpp) = dims(model);
    let kv = 2 * bpp * u128::from(m) * u128::from(b_a) * u128::from(s) * h * l;
    kv + attention_params_times_g(model) < u128::from(tp_a) * u128::from(gpu.mem_capacity) * g
}

/// Attention-node count: both roundings of `k1 E / (k3 K)`, the one with the
/// smaller stage gap at 128 requests per node, floor on ties, at least 1.
pub fn oracle_n_a(cm: &CostModel, model: &MoeModelSpec) -> u32 {
    let e = f64::from(model.experts);
    let k = f64::from(model.topk);
    let x = cm.k1 * e / (cm.k3 * k);
    let lo = (x.floor() as u32).max(1);
    let hi = (x.ceil() as u32).max(1);
    let gap = |n: u32| {
        let t_a = cm.k1 * 128.0 + cm.k2;
        let t_e = cm.k3 * (128.0 * f64::from(n) * k / e) + cm.k4;
        (t_a - t_e).abs()
    };
    if gap(hi) < gap(lo) {
        hi
    } else {
        lo
    }
}

pub struct Eval {
    pub t_a: f64,
    pub t_e: f64,
    pub t_c: f64,
    pub t_total: f64,
    pub tpuc: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MoeModelSpec,
    gpu_a: &GpuSpec,
    gpu_e: &GpuSpec,
    cm: &CostModel,
    limits: &SearchLimits,
    (tp_a, tp_e, n_a, m): (u32, u32, u32, u32),
    batch: u64,
    unit: (f64, f64),
) -> Eval {
    let mf = f64::from(m);
    let b = batch as f64;
    let b_a = b / (mf * f64::from(n_a));
    let b_e = b * f64::from(model.topk) / (mf * f64::from(model.experts)) * limits.expert_imbalance;
    let t_a = cm.k1 * b_a + cm.k2;
    let t_e = cm.k3 * b_e + cm.k4;
    let shape = CommShape {
        b_a,
        b_e,
        tp_a,
        tp_e,
        w_a: gpu_a.net_bandwidth_per_gpu,
        w_e: gpu_e.net_bandwidth_per_gpu,
        attention_nodes: n_a,
    };
    let t_c = comm_time(&shape, model, cm);
    let t_f = t_a.max(t_e);
    let t_total = (t_a + t_e + 2.0 * t_c) + t_f * (mf * f64::from(model.layers) - 1.0);
    let cost = f64::from(tp_a) * f64::from(n_a) * unit.0 + f64::from(tp_e) * f64::from(model.experts) * unit.1;
    Eval {
        t_a,
        t_e,
        t_c,
        t_total,
        tpuc: (b / t_total) / cost,
    }
}

fn unit(g: &GpuSpec, metric: CostMetric) -> f64 {
    match metric {
        CostMetric::Price => g.price,
        CostMetric::Power => g.max_power.expect("power metric needs max_power"),
    }
}

/// Pipeline check: balanced within slack, hideable communication,
/// and `m >= 2 (1 + T_c / T_f)` with strict slack whenever `T_c > 0`.
pub fn pipeline_ok(t_a: f64, t_e: f64, t_c: f64, m: u32, slack: f64) -> bool {
    let t_f = t_a.max(t_e);
    // m T_f > 2 (T_f + T_c), rearranged so both sides are exact
    let enough = if t_c == 0.0 {
        m >= 2
    } else {
        m > 2 && f64::from(m - 2) * t_f > 2.0 * t_c
    };
    (t_a - t_e).abs() / t_f <= slack && t_c < t_f && enough
}

/// Exhaustive argmax over `tp_a x tp_e x microbatches`, with the batch of
/// each candidate found by a linear scan over every attention micro-batch
/// the KV cache admits.
#[allow(clippy::too_many_arguments)]
pub fn brute_force(
    model: &MoeModelSpec,
    gpu_a: &GpuSpec,
    gpu_e: &GpuSpec,
    costs: &dyn CostSource,
    workload: &WorkloadSpec,
    limits: &SearchLimits,
    tps: &[u32],
    microbatches: &[u32],
) -> Option<OraclePlan> {
    let unit = (unit(gpu_a, limits.cost_metric), unit(gpu_e, limits.cost_metric));
    let g = u128::from(model.gqa_group);
    let mut best: Option<OraclePlan> = None;
    for &tp_a in tps.iter().filter(|&&t| t <= gpu_a.max_gpus_per_node) {
        for &tp_e in tps.iter().filter(|&&t| t <= gpu_e.max_gpus_per_node) {
            if u128::from(tp_a) * u128::from(gpu_a.mem_capacity) * g <= attention_params_times_g(model) {
                continue;
            }
            if u128::from(tp_e) * u128::from(gpu_e.mem_capacity) <= expert_params(model) {
                continue;
            }
            let cm = costs
                .cost_model(model, workload, (gpu_a, tp_a), (gpu_e, tp_e))
                .expect("calibration");
            let n_a = oracle_n_a(&cm, model);
            for &m in microbatches {
                let key = (tp_a, tp_e, n_a, m);
                let batch_of = |b_a: u64| b_a * u64::from(m) * u64::from(n_a);
                let mut chosen = None;
                let mut b_a = 1u64;
                while kv_fits(m, b_a, model, workload.avg_seq_len, tp_a, gpu_a) {
                    let ev = evaluate(model, gpu_a, gpu_e, &cm, limits, key, batch_of(b_a), unit);
                    let upper = f64::from(m) * ev.t_a.max(ev.t_e) * f64::from(model.layers);
                    if upper <= workload.slo_tbt {
                        chosen = Some(b_a);
                    }
                    b_a += 1;
                }
                let Some(b_a) = chosen else { continue };
                let batch = batch_of(b_a);
                let ev = evaluate(model, gpu_a, gpu_e, &cm, limits, key, batch, unit);
                if !pipeline_ok(ev.t_a, ev.t_e, ev.t_c, m, limits.balance_slack) {
                    continue;
                }
                let cand = OraclePlan {
                    tp_a,
                    tp_e,
                    n_a,
                    m,
                    batch,
                    t_a: ev.t_a,
                    t_e: ev.t_e,
                    t_c: ev.t_c,
                    total_gpus: u64::from(tp_a) * u64::from(n_a) + u64::from(tp_e) * u64::from(model.experts),
                    tpuc: ev.tpuc,
                };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (cand.tpuc, std::cmp::Reverse(cand.total_gpus), std::cmp::Reverse(cand.m)).partial_cmp(&(
                            b.tpuc,
                            std::cmp::Reverse(b.total_gpus),
                            std::cmp::Reverse(b.m),
                        )) == Some(std::cmp::Ordering::Greater)
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best
}
