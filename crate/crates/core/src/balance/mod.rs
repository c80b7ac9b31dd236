//! Expert placement and attention batch composition.
//!
//! Expert `i` with active cost `a_i` costs `max(a_i, K_cold)` wherever it is
//! hosted, so a node's cost is `C_j = sum_i x_ij * max(a_i, K_cold)`. The
//! placement heuristics aim to minimize `max_j C_j`.

mod attention;
mod trace;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{compose_attention_batches, AttnBatchPlan, NodeBatch, Request};
pub use trace::{load_trace, LoadTrace};

/// Row-sum tolerance of a valid placement.
pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub expert_id: usize,
    /// Per-batch token-processing cost `a_i`.
    pub active_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BalanceMode {
    /// One node per expert.
    Integral,
    /// Hot experts split evenly over at most `max_replicas` nodes.
    Replicated { max_replicas: u32 },
    /// Arbitrary fractions.
    Fractional,
}

impl fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceMode::Integral => f.pad("integral"),
            BalanceMode::Replicated { max_replicas } => f.pad(&format!("replicated({max_replicas})")),
            BalanceMode::Fractional => f.pad("fractional"),
        }
    }
}

impl FromStr for BalanceMode {
    type Err = Error;

    /// Accepts `integral`, `fractional`, `replicated` (2 replicas) and `replicated:R`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "integral" => Ok(BalanceMode::Integral),
            None if lower == "fractional" => Ok(BalanceMode::Fractional),
            None if lower == "replicated" => Ok(BalanceMode::Replicated { max_replicas: 2 }),
            Some(("replicated", r)) => {
                let max_replicas = r
                    .parse()
                    .map_err(|_| Error::invalid("mode", format!("bad replica count '{r}'")))?;
                if max_replicas == 0 {
                    return Err(Error::invalid("mode", "replica count must be >= 1"));
                }
                Ok(BalanceMode::Replicated { max_replicas })
            }
            _ => Err(Error::Unknown {
                kind: "balance mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Allocation fractions, experts by nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub mode: BalanceMode,
    pub nodes: usize,
    /// `x[i][j]` is the share of expert `i` hosted on node `j`.
    pub x: Vec<Vec<f64>>,
}

impl Placement {
    fn empty(mode: BalanceMode, experts: usize, nodes: usize) -> Self {
        Placement {
            mode,
            nodes,
            x: vec![vec![0.0; nodes]; experts],
        }
    }

    /// Checks row sums, entry ranges and the per-mode row shape.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.x.iter().enumerate() {
            if row.len() != self.nodes {
                return Err(Error::invalid(
                    "placement",
                    format!("row {i} has {} entries, expected {}", row.len(), self.nodes),
                ));
            }
            if row.iter().any(|&v| !(0.0..=1.0 + ROW_TOLERANCE).contains(&v)) {
                return Err(Error::invalid(
                    "placement",
                    format!("row {i} has an entry outside [0, 1]"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::invalid("placement", format!("row {i} sums to {sum}")));
            }
            let nonzero = row.iter().filter(|&&v| v > 0.0).count();
            match self.mode {
                BalanceMode::Integral if nonzero != 1 || !row.contains(&1.0) => {
                    return Err(Error::invalid("placement", format!("row {i} is not integral")));
                }
                BalanceMode::Replicated { max_replicas } if nonzero > max_replicas as usize => {
                    return Err(Error::invalid("placement", format!("row {i} has {nonzero} replicas")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Nodes hosting any share of each expert.
    pub fn replicas(&self) -> Vec<Vec<usize>> {
        self.x
            .iter()
            .map(|row| (0..self.nodes).filter(|&j| row[j] > 0.0).collect())
            .collect()
    }
}

/// `max(a_i, K_cold)`.
pub fn effective_cost(a: f64, k_cold: f64) -> f64 {
    a.max(k_cold)
}

/// `C_j = sum_i x_ij * max(a_i, K_cold)` for every node.
pub fn node_cost(placement: &Placement, loads: &[f64], k_cold: f64) -> Vec<f64> {
    let mut c = vec![0.0; placement.nodes];
    for (row, &a) in placement.x.iter().zip(loads) {
        let eff = effective_cost(a, k_cold);
        for (cj, &x) in c.iter_mut().zip(row) {
            *cj += x * eff;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub mode: BalanceMode,
    /// Limit on expert shares per node; integral and replicated modes only.
    pub max_experts_per_node: Option<usize>,
}

impl From<BalanceMode> for BalanceOptions {
    fn from(mode: BalanceMode) -> Self {
        BalanceOptions {
            mode,
            max_experts_per_node: None,
        }
    }
}

/// Greedy placement without a per-node cap; see [`balance_experts_with`].
pub fn balance_experts(loads: &[f64], nodes: usize, k_cold: f64, mode: BalanceMode) -> Result<Placement> {
    balance_experts_with(loads, nodes, k_cold, &mode.into())
}

/// Places experts on `nodes` nodes.
///
/// Experts are taken by effective cost, largest first (ties by id).
/// Integral mode assigns each to the least-loaded node (LPT). Replicated mode
/// first splits every expert above the average `sum / N` evenly over the
/// `min(R, N, ceil(eff / avg))` least-loaded nodes, then runs LPT on the rest.
/// Fractional mode fills nodes in turn up to the average, wrapping the
/// overflow onto the next node, which reaches `max_j C_j = sum / N`.
pub fn balance_experts_with(loads: &[f64], nodes: usize, k_cold: f64, opts: &BalanceOptions) -> Result<Placement> {
    if nodes == 0 {
        return Err(Error::invalid("nodes", "need at least one node"));
    }
    if loads.is_empty() {
        return Err(Error::invalid("loads", "need at least one expert"));
    }
    if let Some((i, a)) = loads.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::invalid("loads", format!("expert {i} has cost {a}")));
    }
    if !(k_cold.is_finite() && k_cold >= 0.0) {
        return Err(Error::invalid("k_cold", "must be finite and >= 0"));
    }
    if let Some(cap) = opts.max_experts_per_node {
        if opts.mode == BalanceMode::Fractional {
            return Err(Error::invalid(
                "max_experts_per_node",
                "not supported in fractional mode",
            ));
        }
        if cap.saturating_mul(nodes) < loads.len() {
            return Err(Error::invalid(
                "max_experts_per_node",
                format!("{cap} per node cannot host {} experts on {nodes} nodes", loads.len()),
            ));
        }
    }
    let eff: Vec<f64> = loads.iter().map(|&a| effective_cost(a, k_cold)).collect();
    let mut order: Vec<usize> = (0..eff.len()).collect();
    order.sort_by(|&a, &b| eff[b].total_cmp(&eff[a]).then(a.cmp(&b)));

    let placement = match opts.mode {
        BalanceMode::Fractional => wrap_around(&eff, &order, nodes),
        BalanceMode::Integral => {
            let mut state = Greedy::new(opts.mode, eff.len(), nodes, opts.max_experts_per_node);
            for &i in &order {
                state.assign_whole(i, eff[i]);
            }
            state.placement
        }
        BalanceMode::Replicated { max_replicas } => {
            let avg = eff.iter().sum::<f64>() / nodes as f64;
            let mut state = Greedy::new(opts.mode, eff.len(), nodes, opts.max_experts_per_node);
            let (hot, cold): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| eff[i] > avg);
            // replicas beyond the first use up cap slots the others need
            let mut spare = opts
                .max_experts_per_node
                .map_or(usize::MAX, |cap| cap * nodes - eff.len());
            for &i in &hot {
                let wanted = (eff[i] / avg).ceil() as usize;
                let r = wanted
                    .min(max_replicas as usize)
                    .min(nodes)
                    .min(spare.saturating_add(1))
                    .max(1);
                spare -= r - 1;
                state.assign_split(i, eff[i], r);
            }
            for &i in &cold {
                state.assign_whole(i, eff[i]);
            }
            state.placement
        }
    };
    debug_assert!(placement.validate().is_ok());
    Ok(placement)
}

struct Greedy {
    placement: Placement,
    load: Vec<f64>,
    count: Vec<usize>,
    cap: usize,
}

impl Greedy {
    fn new(mode: BalanceMode, experts: usize, nodes: usize, cap: Option<usize>) -> Self {
        Greedy {
            placement: Placement::empty(mode, experts, nodes),
            load: vec![0.0; nodes],
            count: vec![0; nodes],
            cap: cap.unwrap_or(usize::MAX),
        }
    }

    /// Open nodes ordered by load, then index.
    fn least_loaded(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.load.len()).filter(|&j| self.count[j] < self.cap).collect();
        idx.sort_by(|&a, &b| match self.load[a].total_cmp(&self.load[b]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        idx
    }

    fn assign_whole(&mut self, i: usize, eff: f64) {
        // the cap check up front guarantees an open node
        let j = self.least_loaded()[0];
        self.placement.x[i][j] = 1.0;
        self.load[j] += eff;
        self.count[j] += 1;
    }

    fn assign_split(&mut self, i: usize, eff: f64, r: usize) {
        let open = self.least_loaded();
        let targets = &open[..r.min(open.len()).max(1)];
        let share = 1.0 / targets.len() as f64;
        for &j in targets {
            self.placement.x[i][j] = share;
            self.load[j] += eff * share;
            self.count[j] += 1;
        }
    }
}

/// Fills node 0 to the average, carries the remainder to node 1, and so on.
fn wrap_around(eff: &[f64], order: &[usize], nodes: usize) -> Placement {
    let mut p = Placement::empty(BalanceMode::Fractional, eff.len(), nodes);
    let avg = eff.iter().sum::<f64>() / nodes as f64;
    let mut j = 0;
    let mut filled = 0.0;
    for &i in order {
        if eff[i] == 0.0 {
            p.x[i][j] = 1.0;
            continue;
        }
        let mut left = eff[i];
        while left > 0.0 {
            let room = avg - filled;
            if j == nodes - 1 || left <= room {
                p.x[i][j] += left / eff[i];
                filled += left;
                left = 0.0;
            } else {
                if room > 0.0 {
                    p.x[i][j] += room / eff[i];
                }
                left -= room.max(0.0);
                j += 1;
                filled = 0.0;
            }
        }
    }
    normalize_rows(&mut p);
    p
}

/// Removes rounding drift so every row sums to one.
fn normalize_rows(p: &mut Placement) {
    for row in &mut p.x {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum != 1.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

/// Summary of a placement for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub mode: BalanceMode,
    pub nodes: usize,
    pub k_cold: f64,
    pub node_cost: Vec<f64>,
    pub c_max: f64,
    /// `sum_i max(a_i, K_cold) / N`, the lower bound on `c_max`.
    pub average: f64,
    /// `c_max / average`.
    pub imbalance: f64,
    /// Rebalance cadence in decoding steps, echoed from the caller.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rebalance_interval: Option<u32>,
    pub placement: Placement,
}

impl PlacementReport {
    pub fn new(placement: Placement, loads: &[f64], k_cold: f64) -> Self {
        let node_cost = node_cost(&placement, loads, k_cold);
        let c_max = node_cost.iter().copied().fold(0.0, f64::max);
        let average = loads.iter().map(|&a| effective_cost(a, k_cold)).sum::<f64>() / placement.nodes as f64;
        PlacementReport {
            mode: placement.mode,
            nodes: placement.nodes,
            k_cold,
            imbalance: if average > 0.0 { c_max / average } else { 1.0 },
            node_cost,
            c_max,
            average,
            rebalance_interval: None,
            placement,
        }
    }
}
