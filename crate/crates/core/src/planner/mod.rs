//! Deployment plan search for the decoding phase.
//!
//! For every pair of tensor-parallel sizes the search fixes the attention node
//! count from the calibrated slopes, then for each micro-batch count finds the
//! largest global batch that meets the latency SLO and the KV-cache budget,
//! and keeps the plan with the highest throughput per unit cost.

mod hetero;

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::catalog::{CostMetric, GpuSpec, MoeModelSpec, SearchLimits, WorkloadSpec};
use crate::error::{Error, Result};
use crate::perf_model::memory::{attention_params_fit, expert_fits, max_attention_batch};
use crate::perf_model::{attention_time, comm_time, expert_time, kv_cache_check, CommShape, CostModel, CostSource};
use crate::pipeline::{closed_form_total, min_microbatches, simulate, StageTimes};

pub use hetero::{hetero_search, ExcludedPair, HeteroOutcome, PairResult};

/// Tensor-parallel sizes considered on a node.
pub const TP_CHOICES: [u32; 4] = [1, 2, 4, 8];

/// Attention micro-batch at which the two roundings of `n_a` are compared.
pub const REPRESENTATIVE_BATCH: f64 = 128.0;

/// `TP_CHOICES` that fit on one node.
pub fn tp_choices(max_gpus_per_node: u32) -> Vec<u32> {
    TP_CHOICES.into_iter().filter(|&tp| tp <= max_gpus_per_node).collect()
}

/// Attention nodes per expert fleet that equalize the two stages:
/// `k1 * E / (k3 * K)` rounded to an integer >= 1.
pub fn balance_attention_nodes(cm: &CostModel, experts: u32, topk: u32) -> u32 {
    balance_attention_nodes_at(cm, experts, topk, REPRESENTATIVE_BATCH)
}

/// As [`balance_attention_nodes`], choosing between floor and ceiling by the
/// smaller `|T_a - T_e|` at attention micro-batch `b_a` (ties pick the floor).
pub fn balance_attention_nodes_at(cm: &CostModel, experts: u32, topk: u32, b_a: f64) -> u32 {
    let x = cm.k1 * f64::from(experts) / (cm.k3 * f64::from(topk));
    if !x.is_finite() {
        return 1;
    }
    let lo = x.floor().max(1.0) as u32;
    let hi = x.ceil().max(1.0) as u32;
    if lo == hi {
        return lo;
    }
    let gap = |n: u32| {
        let b_e = b_a * f64::from(n) * f64::from(topk) / f64::from(experts);
        (attention_time(b_a, cm) - expert_time(b_e, cm)).abs()
    };
    if gap(hi) < gap(lo) {
        hi
    } else {
        lo
    }
}

/// The constraint that rules a candidate out, or that limits its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingConstraint {
    /// `tp_a * C_a <= P_a`.
    AttentionMemory,
    /// `tp_e * C_e <= P_e`.
    ExpertMemory,
    /// KV cache plus attention weights exceed the node.
    KvCache,
    /// `m * T_f * L > SLO`.
    Slo,
    /// `|T_a - T_e| / T_f` above the configured slack.
    Balance,
    /// `T_c >= T_f`.
    Communication,
    /// Fewer micro-batches than needed to hide communication.
    Microbatches,
}

impl fmt::Display for BindingConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindingConstraint::AttentionMemory => "attention memory",
            BindingConstraint::ExpertMemory => "expert memory",
            BindingConstraint::KvCache => "kv cache",
            BindingConstraint::Slo => "slo",
            BindingConstraint::Balance => "balance",
            BindingConstraint::Communication => "communication",
            BindingConstraint::Microbatches => "microbatches",
        })
    }
}

/// A candidate before its batch size is chosen.
#[derive(Debug, Clone, Copy)]
pub struct Skeleton<'a> {
    pub model: &'a MoeModelSpec,
    pub gpu_a: &'a GpuSpec,
    pub gpu_e: &'a GpuSpec,
    pub tp_a: u32,
    pub tp_e: u32,
    pub n_a: u32,
    pub m: u32,
    /// Per-GPU cost of each role under the active metric.
    pub unit_cost: (f64, f64),
    pub expert_imbalance: f64,
}

/// Stage times and throughput of a skeleton at one global batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub batch: u64,
    pub b_a: f64,
    pub b_e: f64,
    pub times: StageTimes,
    pub t_iter_upper: f64,
    pub t_total: f64,
    /// Tokens per second.
    pub throughput: f64,
    pub tpuc: f64,
}

impl Skeleton<'_> {
    pub fn total_gpus(&self) -> u64 {
        u64::from(self.tp_a) * u64::from(self.n_a) + u64::from(self.tp_e) * u64::from(self.model.experts)
    }

    /// `tp_a * n_a * Cost_a + tp_e * E * Cost_e`.
    pub fn cost(&self) -> f64 {
        f64::from(self.tp_a) * f64::from(self.n_a) * self.unit_cost.0
            + f64::from(self.tp_e) * f64::from(self.model.experts) * self.unit_cost.1
    }

    /// Global batch for an integral attention micro-batch `b_a`.
    pub fn batch_for(&self, b_a: u64) -> u64 {
        b_a.saturating_mul(u64::from(self.m) * u64::from(self.n_a))
    }

    pub fn evaluate(&self, batch: u64, cm: &CostModel) -> Evaluation {
        let m = f64::from(self.m);
        let b = batch as f64;
        let b_a = b / (m * f64::from(self.n_a));
        let b_e = b * f64::from(self.model.topk) / (m * f64::from(self.model.experts)) * self.expert_imbalance;
        let shape = CommShape {
            b_a,
            b_e,
            tp_a: self.tp_a,
            tp_e: self.tp_e,
            w_a: self.gpu_a.net_bandwidth_per_gpu,
            w_e: self.gpu_e.net_bandwidth_per_gpu,
            attention_nodes: self.n_a,
        };
        let times = StageTimes {
            t_a: attention_time(b_a, cm),
            t_e: expert_time(b_e, cm),
            t_c: comm_time(&shape, self.model, cm),
        };
        let t_iter_upper = m * times.t_f() * f64::from(self.model.layers);
        let t_total = closed_form_total(&times, self.m, self.model.layers).unwrap_or(f64::INFINITY);
        let throughput = b / t_total;
        Evaluation {
            batch,
            b_a,
            b_e,
            times,
            t_iter_upper,
            t_total,
            throughput,
            tpuc: throughput / self.cost(),
        }
    }
}

/// Result of the batch search for one skeleton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSearch {
    /// Largest feasible batch and whether the SLO or the KV cache stopped it.
    Feasible {
        batch: u64,
        tpuc: f64,
        limit: BindingConstraint,
    },
    Infeasible(BindingConstraint),
}

/// Largest global batch, a multiple of `m * n_a`, with `m * T_f * L <= SLO`
/// and a KV cache that fits. Both conditions are monotone in the batch, so
/// the search is a bisection over the attention micro-batch.
pub fn max_batch_under_slo(skel: &Skeleton<'_>, cm: &CostModel, workload: &WorkloadSpec) -> BatchSearch {
    let Some(mem_cap) = max_attention_batch(skel.m, skel.model, workload, skel.tp_a, skel.gpu_a) else {
        return BatchSearch::Infeasible(BindingConstraint::AttentionMemory);
    };
    if mem_cap == 0 {
        return BatchSearch::Infeasible(BindingConstraint::KvCache);
    }
    let slo_ok = |b_a: u64| skel.evaluate(skel.batch_for(b_a), cm).t_iter_upper <= workload.slo_tbt;
    if !slo_ok(1) {
        return BatchSearch::Infeasible(BindingConstraint::Slo);
    }
    // T_a alone bounds b_a from above
    let per_layer = workload.slo_tbt / (f64::from(skel.m) * f64::from(skel.model.layers));
    let slo_cap = ((per_layer - cm.k2) / cm.k1).floor().max(1.0) + 1.0;
    let hi_bound = if slo_cap >= mem_cap as f64 {
        mem_cap
    } else {
        slo_cap as u64
    };
    let (mut lo, mut hi) = (1u64, hi_bound);
    if slo_ok(hi) {
        lo = hi;
    } else {
        // invariant: slo_ok(lo) && !slo_ok(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if slo_ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let limit = if lo == mem_cap {
        BindingConstraint::KvCache
    } else {
        BindingConstraint::Slo
    };
    let batch = skel.batch_for(lo);
    BatchSearch::Feasible {
        batch,
        tpuc: skel.evaluate(batch, cm).tpuc,
        limit,
    }
}

/// Balance, communication hiding and micro-batch count at a chosen batch; the first failing one.
pub fn check_pipeline_constraints(times: &StageTimes, m: u32, balance_slack: f64) -> Option<BindingConstraint> {
    let t_f = times.t_f();
    if (times.t_a - times.t_e).abs() / t_f > balance_slack {
        return Some(BindingConstraint::Balance);
    }
    if times.t_c >= t_f {
        return Some(BindingConstraint::Communication);
    }
    match min_microbatches(times.t_c, t_f) {
        Ok(min_m) if m >= min_m => None,
        _ => Some(BindingConstraint::Microbatches),
    }
}

/// One row of the candidate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tp_a: u32,
    pub tp_e: u32,
    pub n_a: Option<u32>,
    pub m: u32,
    pub batch: Option<u64>,
    pub t_a: Option<f64>,
    pub t_e: Option<f64>,
    pub t_c: Option<f64>,
    pub total_gpus: Option<u64>,
    pub tpuc: Option<f64>,
    /// Empty for feasible candidates.
    pub binding: Option<BindingConstraint>,
}

impl Candidate {
    pub fn is_feasible(&self) -> bool {
        self.binding.is_none() && self.tpuc.is_some()
    }
}

/// Remaining headroom of each constraint; all are >= 0 for a valid plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    /// `balance_slack - |T_a - T_e| / T_f`.
    pub balance: f64,
    /// `T_f - T_c`, seconds.
    pub communication: f64,
    /// `m - min_microbatches`.
    pub microbatches: i64,
    /// `tp_a * C_a - (KV cache + P_a)`, bytes.
    pub kv_cache_bytes: f64,
    /// `tp_e * C_e - P_e`, bytes.
    pub expert_memory_bytes: f64,
    /// `SLO - m * T_f * L`, seconds.
    pub slo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub gpu_a: String,
    pub gpu_e: String,
    pub tp_a: u32,
    pub tp_e: u32,
    pub n_a: u32,
    /// Expert nodes, one expert each.
    pub experts: u32,
    pub m: u32,
    /// Global batch in tokens.
    pub batch: u64,
    pub b_a: f64,
    pub b_e: f64,
    pub t_a: f64,
    pub t_e: f64,
    pub t_c: f64,
    pub t_f: f64,
    pub t_iter_upper: f64,
    pub t_total: f64,
    /// Event-simulated counterparts of the closed forms.
    pub t_total_simulated: f64,
    pub t_iter_simulated: f64,
    pub throughput: f64,
    pub total_gpus: u64,
    pub cost_metric: CostMetric,
    pub cost: f64,
    pub tpuc: f64,
    /// What stopped the batch from growing.
    pub batch_limit: BindingConstraint,
    pub slack: ConstraintSlack,
}

/// Explicit subsets of the enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub tp_a: Vec<u32>,
    pub tp_e: Vec<u32>,
    pub microbatches: Vec<u32>,
}

impl SearchSpace {
    pub fn full(gpu_a: &GpuSpec, gpu_e: &GpuSpec, limits: &SearchLimits) -> Self {
        SearchSpace {
            tp_a: tp_choices(gpu_a.max_gpus_per_node),
            tp_e: tp_choices(gpu_e.max_gpus_per_node),
            microbatches: (3..=limits.max_microbatches).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Option<DeploymentPlan>,
    pub candidates: Vec<Candidate>,
    /// Calls to [`max_batch_under_slo`].
    pub evaluations: usize,
}

impl SearchOutcome {
    /// Binding constraints of the rejected candidates, most frequent first.
    pub fn binding_counts(&self) -> Vec<(BindingConstraint, usize)> {
        let mut counts: Vec<(BindingConstraint, usize)> = Vec::new();
        for b in self.candidates.iter().filter_map(|c| c.binding) {
            match counts.iter_mut().find(|(k, _)| *k == b) {
                Some((_, n)) => *n += 1,
                None => counts.push((b, 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts
    }

    pub fn dominant_binding(&self) -> Option<BindingConstraint> {
        self.binding_counts().first().map(|&(b, _)| b)
    }

    /// The candidate table as CSV.
    pub fn write_explain_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse {
            context: "candidate csv".into(),
            message: e.to_string(),
        };
        for c in &self.candidates {
            w.serialize(c).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse {
            context: "candidate csv".into(),
            message: e.to_string(),
        })
    }
}

/// Orders feasible candidates best first: higher tpuc, then fewer GPUs,
/// smaller `m`, smaller `tp_a`, smaller `tp_e`.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    let tpuc = |c: &Candidate| c.tpuc.unwrap_or(f64::NEG_INFINITY);
    tpuc(b)
        .total_cmp(&tpuc(a))
        .then(a.total_gpus.cmp(&b.total_gpus))
        .then(a.m.cmp(&b.m))
        .then(a.tp_a.cmp(&b.tp_a))
        .then(a.tp_e.cmp(&b.tp_e))
}

fn unit_costs(gpu_a: &GpuSpec, gpu_e: &GpuSpec, metric: CostMetric) -> Result<(f64, f64)> {
    let get = |g: &GpuSpec| {
        g.unit_cost(metric).ok_or_else(|| Error::Invalid {
            field: format!("hardware.{}.max_power", g.name),
            message: format!("needed for the {metric} metric"),
        })
    };
    Ok((get(gpu_a)?, get(gpu_e)?))
}

/// Best plan over the full enumeration for a fixed hardware pair.
pub fn search(
    model: &MoeModelSpec,
    gpu_a: &GpuSpec,
    gpu_e: &GpuSpec,
    costs: &dyn CostSource,
    workload: &WorkloadSpec,
    limits: &SearchLimits,
) -> Result<SearchOutcome> {
    let space = SearchSpace::full(gpu_a, gpu_e, limits);
    search_in(&space, model, gpu_a, gpu_e, costs, workload, limits)
}

/// [`search`] restricted to `space`.
pub fn search_in(
    space: &SearchSpace,
    model: &MoeModelSpec,
    gpu_a: &GpuSpec,
    gpu_e: &GpuSpec,
    costs: &dyn CostSource,
    workload: &WorkloadSpec,
    limits: &SearchLimits,
) -> Result<SearchOutcome> {
    model.validate()?;
    workload.validate()?;
    limits.validate()?;
    gpu_a.validate()?;
    gpu_e.validate()?;
    let unit_cost = unit_costs(gpu_a, gpu_e, limits.cost_metric)?;
    let p_e = crate::perf_model::param_sizes(model).expert;

    let mut candidates = Vec::new();
    let mut evaluations = 0;
    let mut best: Option<(Candidate, CostModel)> = None;
    for &tp_a in &space.tp_a {
        for &tp_e in &space.tp_e {
            let rejected = |binding| {
                space.microbatches.iter().map(move |&m| Candidate {
                    tp_a,
                    tp_e,
                    n_a: None,
                    m,
                    batch: None,
                    t_a: None,
                    t_e: None,
                    t_c: None,
                    total_gpus: None,
                    tpuc: None,
                    binding: Some(binding),
                })
            };
            if !attention_params_fit(model, tp_a, gpu_a) {
                candidates.extend(rejected(BindingConstraint::AttentionMemory));
                continue;
            }
            if !expert_fits(p_e, tp_e, gpu_e) {
                candidates.extend(rejected(BindingConstraint::ExpertMemory));
                continue;
            }
            let cm = costs.cost_model(model, workload, (gpu_a, tp_a), (gpu_e, tp_e))?;
            let n_a = balance_attention_nodes(&cm, model.experts, model.topk);
            for &m in &space.microbatches {
                let skel = Skeleton {
                    model,
                    gpu_a,
                    gpu_e,
                    tp_a,
                    tp_e,
                    n_a,
                    m,
                    unit_cost,
                    expert_imbalance: limits.expert_imbalance,
                };
                evaluations += 1;
                let mut cand = Candidate {
                    tp_a,
                    tp_e,
                    n_a: Some(n_a),
                    m,
                    batch: None,
                    t_a: None,
                    t_e: None,
                    t_c: None,
                    total_gpus: Some(skel.total_gpus()),
                    tpuc: None,
                    binding: None,
                };
                match max_batch_under_slo(&skel, &cm, workload) {
                    BatchSearch::Infeasible(b) => cand.binding = Some(b),
                    BatchSearch::Feasible { batch, tpuc, .. } => {
                        let ev = skel.evaluate(batch, &cm);
                        cand.batch = Some(batch);
                        cand.t_a = Some(ev.times.t_a);
                        cand.t_e = Some(ev.times.t_e);
                        cand.t_c = Some(ev.times.t_c);
                        cand.binding = check_pipeline_constraints(&ev.times, m, limits.balance_slack);
                        if cand.binding.is_none() {
                            cand.tpuc = Some(tpuc);
                        }
                    }
                }
                if cand.is_feasible() && best.as_ref().is_none_or(|(b, _)| rank(&cand, b) == Ordering::Less) {
                    best = Some((cand.clone(), cm.clone()));
                }
                candidates.push(cand);
            }
        }
    }
    let best = match best {
        Some((cand, cm)) => Some(build_plan(
            &cand, &cm, model, gpu_a, gpu_e, workload, limits, unit_cost,
        )?),
        None => None,
    };
    Ok(SearchOutcome {
        best,
        candidates,
        evaluations,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_plan(
    cand: &Candidate,
    cm: &CostModel,
    model: &MoeModelSpec,
    gpu_a: &GpuSpec,
    gpu_e: &GpuSpec,
    workload: &WorkloadSpec,
    limits: &SearchLimits,
    unit_cost: (f64, f64),
) -> Result<DeploymentPlan> {
    let n_a = cand.n_a.expect("feasible candidates carry n_a");
    let batch = cand.batch.expect("feasible candidates carry a batch");
    let skel = Skeleton {
        model,
        gpu_a,
        gpu_e,
        tp_a: cand.tp_a,
        tp_e: cand.tp_e,
        n_a,
        m: cand.m,
        unit_cost,
        expert_imbalance: limits.expert_imbalance,
    };
    let ev = skel.evaluate(batch, cm);
    let t = ev.times;
    let b_a = batch / (u64::from(cand.m) * u64::from(n_a));
    let mem = kv_cache_check(cand.m, b_a, model, workload, cand.tp_a, gpu_a)?.with_expert(cand.tp_e, gpu_e);
    let min_m = min_microbatches(t.t_c, t.t_f())?;
    let sim = simulate(&t, cand.m, model.layers)?;
    let batch_limit = match max_batch_under_slo(&skel, cm, workload) {
        BatchSearch::Feasible { limit, .. } => limit,
        BatchSearch::Infeasible(b) => b,
    };
    let capacity_e = f64::from(cand.tp_e) * gpu_e.mem_capacity as f64;
    Ok(DeploymentPlan {
        gpu_a: gpu_a.name.clone(),
        gpu_e: gpu_e.name.clone(),
        tp_a: cand.tp_a,
        tp_e: cand.tp_e,
        n_a,
        experts: model.experts,
        m: cand.m,
        batch,
        b_a: ev.b_a,
        b_e: ev.b_e,
        t_a: t.t_a,
        t_e: t.t_e,
        t_c: t.t_c,
        t_f: t.t_f(),
        t_iter_upper: ev.t_iter_upper,
        t_total: ev.t_total,
        t_total_simulated: sim.total_latency,
        t_iter_simulated: sim.max_iter_latency(),
        throughput: ev.throughput,
        total_gpus: skel.total_gpus(),
        cost_metric: limits.cost_metric,
        cost: skel.cost(),
        tpuc: ev.tpuc,
        batch_limit,
        slack: ConstraintSlack {
            balance: limits.balance_slack - (t.t_a - t.t_e).abs() / t.t_f(),
            communication: t.t_f() - t.t_c,
            microbatches: i64::from(cand.m) - i64::from(min_m),
            kv_cache_bytes: mem.attn_capacity as f64 - (mem.kv_bytes + mem.attn_param_bytes as f64),
            expert_memory_bytes: capacity_e - mem.expert_param_bytes as f64,
            slo: workload.slo_tbt - ev.t_iter_upper,
        },
    })
}
