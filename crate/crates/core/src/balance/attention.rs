use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_model::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub seq_len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBatch {
    pub requests: Vec<u64>,
    /// Sum of per-request costs, seconds.
    pub load: f64,
    /// `k2 + load`.
    pub predicted_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBatchPlan {
    pub target_time: f64,
    pub nodes: Vec<NodeBatch>,
}

impl AttnBatchPlan {
    pub fn max_time(&self) -> f64 {
        self.nodes.iter().map(|n| n.predicted_time).fold(0.0, f64::max)
    }

    pub fn min_time(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.predicted_time)
            .fold(f64::INFINITY, f64::min)
    }

    /// `max / min` predicted node time.
    pub fn spread(&self) -> f64 {
        self.max_time() / self.min_time()
    }
}

/// Packs requests onto `n_a` attention nodes so each node's predicted time
/// `k2 + sum(alpha * seq_len + beta)` approaches `target_time`.
///
/// First-fit decreasing by cost (ties keep input order). A request that fits
/// under the target on no node goes to the least-loaded node, lowest index
/// first.
pub fn compose_attention_batches(
    requests: &[Request],
    n_a: usize,
    cm: &CostModel,
    target_time: f64,
) -> Result<AttnBatchPlan> {
    if n_a == 0 {
        return Err(Error::invalid("n_a", "need at least one attention node"));
    }
    if !(target_time > 0.0 && target_time.is_finite()) {
        return Err(Error::invalid(
            "target_time",
            format!("must be > 0 (got {target_time})"),
        ));
    }
    let cost: Vec<f64> = requests.iter().map(|r| cm.request_cost(f64::from(r.seq_len))).collect();
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by(|&a, &b| cost[b].total_cmp(&cost[a]).then(a.cmp(&b)));

    let capacity = target_time - cm.k2;
    let mut nodes = vec![
        NodeBatch {
            requests: Vec::new(),
            load: 0.0,
            predicted_time: 0.0,
        };
        n_a
    ];
    for &i in &order {
        let j = nodes
            .iter()
            .position(|n| n.load + cost[i] <= capacity)
            .unwrap_or_else(|| {
                (0..n_a)
                    .min_by(|&a, &b| match nodes[a].load.total_cmp(&nodes[b].load) {
                        Ordering::Equal => a.cmp(&b),
                        o => o,
                    })
                    .expect("n_a >= 1")
            });
        nodes[j].requests.push(requests[i].id);
        nodes[j].load += cost[i];
    }
    for n in &mut nodes {
        n.predicted_time = cm.k2 + n.load;
    }
    Ok(AttnBatchPlan { target_time, nodes })
}
