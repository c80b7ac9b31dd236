use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{search, BindingConstraint, DeploymentPlan};
use crate::catalog::{Catalog, CostMetric, MoeModelSpec, SearchLimits, WorkloadSpec};
use crate::error::Result;
use crate::perf_model::CostSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub gpu_a: String,
    pub gpu_e: String,
    pub plan: Option<DeploymentPlan>,
    /// Most frequent reason the pair's candidates were rejected.
    pub binding: Option<BindingConstraint>,
}

/// A pair skipped before searching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedPair {
    pub gpu_a: String,
    pub gpu_e: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroOutcome {
    /// Feasible pairs, best first.
    pub ranked: Vec<PairResult>,
    /// Pairs searched without a feasible plan, in catalog order.
    pub infeasible: Vec<PairResult>,
    pub excluded: Vec<ExcludedPair>,
}

impl HeteroOutcome {
    pub fn best(&self) -> Option<&PairResult> {
        self.ranked.first()
    }

    /// Rank of `(gpu_a, gpu_e)` among feasible pairs, 0 = best.
    pub fn position(&self, gpu_a: &str, gpu_e: &str) -> Option<usize> {
        self.ranked
            .iter()
            .position(|p| p.gpu_a.eq_ignore_ascii_case(gpu_a) && p.gpu_e.eq_ignore_ascii_case(gpu_e))
    }
}

fn plan_order(a: &DeploymentPlan, b: &DeploymentPlan) -> Ordering {
    b.tpuc
        .total_cmp(&a.tpuc)
        .then(a.total_gpus.cmp(&b.total_gpus))
        .then(a.m.cmp(&b.m))
        .then(a.tp_a.cmp(&b.tp_a))
        .then(a.tp_e.cmp(&b.tp_e))
}

/// Runs [`search`] for every ordered (attention GPU, expert GPU) pair of the
/// catalog in parallel and ranks the pairs by tpuc. Equal plans keep catalog
/// order. Under the power metric, pairs with an entry lacking `max_power`
/// are excluded.
pub fn hetero_search(
    model: &MoeModelSpec,
    catalog: &Catalog,
    costs: &dyn CostSource,
    workload: &WorkloadSpec,
    limits: &SearchLimits,
) -> Result<HeteroOutcome> {
    let gpus: Vec<_> = catalog.iter().collect();
    let pairs: Vec<_> = gpus.iter().flat_map(|&a| gpus.iter().map(move |&e| (a, e))).collect();

    let mut excluded = Vec::new();
    let mut searchable = Vec::new();
    for (a, e) in pairs {
        let missing: Vec<&str> = [a, e]
            .iter()
            .filter(|g| g.unit_cost(limits.cost_metric).is_none())
            .map(|g| g.name.as_str())
            .collect();
        if missing.is_empty() {
            searchable.push((a, e));
        } else {
            debug_assert_eq!(limits.cost_metric, CostMetric::Power);
            let mut names = missing;
            names.dedup();
            excluded.push(ExcludedPair {
                gpu_a: a.name.clone(),
                gpu_e: e.name.clone(),
                reason: format!("no max_power for {}", names.join(", ")),
            });
        }
    }

    let results: Vec<PairResult> = searchable
        .par_iter()
        .map(|&(a, e)| {
            let outcome = search(model, a, e, costs, workload, limits)?;
            let binding = if outcome.best.is_none() {
                outcome.dominant_binding()
            } else {
                None
            };
            Ok(PairResult {
                gpu_a: a.name.clone(),
                gpu_e: e.name.clone(),
                plan: outcome.best,
                binding,
            })
        })
        .collect::<Result<_>>()?;

    let (mut ranked, infeasible): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.plan.is_some());
    ranked.sort_by(|a, b| match (&a.plan, &b.plan) {
        (Some(pa), Some(pb)) => plan_order(pa, pb),
        _ => Ordering::Equal,
    });
    Ok(HeteroOutcome {
        ranked,
        infeasible,
        excluded,
    })
}
