use serde::{Deserialize, Serialize};

use super::CostModel;
use crate::catalog::MoeModelSpec;

/// Per-node micro-batch sizes and link speeds for one dispatch/combine round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommShape {
    pub b_a: f64,
    pub b_e: f64,
    pub tp_a: u32,
    pub tp_e: u32,
    /// Network bandwidth per attention GPU, bytes/s.
    pub w_a: f64,
    /// Network bandwidth per expert GPU, bytes/s.
    pub w_e: f64,
    /// Receivers of the combine step.
    pub attention_nodes: u32,
}

/// Bytes one attention GPU sends per micro-batch: `b_a * h * K * bytes / tp_a`.
pub fn dispatch_bytes(b_a: f64, model: &MoeModelSpec, tp_a: u32) -> f64 {
    b_a * f64::from(model.hidden) * f64::from(model.topk) * f64::from(model.bytes_per_param) / f64::from(tp_a)
}

/// Bytes one expert GPU sends back per micro-batch: `b_e * h * bytes / tp_e`.
pub fn combine_bytes(b_e: f64, model: &MoeModelSpec, tp_e: u32) -> f64 {
    b_e * f64::from(model.hidden) * f64::from(model.bytes_per_param) / f64::from(tp_e)
}

/// Average payload from one attention GPU to one expert GPU:
/// `b_a * K / E * h * bytes / tp_a`.
pub fn pair_message_bytes(b_a: u64, model: &MoeModelSpec, tp_a: u32) -> f64 {
    let tokens = (b_a * u64::from(model.topk)) as f64 / f64::from(model.experts);
    tokens * f64::from(model.hidden) * f64::from(model.bytes_per_param) / f64::from(tp_a)
}

/// One-way communication time of a micro-batch: the slower of the send
/// (attention to experts) and receive (experts to attention) directions,
/// each including the backend's per-message overhead.
pub fn comm_time(shape: &CommShape, model: &MoeModelSpec, cm: &CostModel) -> f64 {
    let util = &cm.util_curve;
    let backend = &cm.comm_backend;
    let send = util.transfer_time(dispatch_bytes(shape.b_a, model, shape.tp_a), shape.w_a)
        + backend.message_overhead(model.experts);
    let recv = util.transfer_time(combine_bytes(shape.b_e, model, shape.tp_e), shape.w_e)
        + backend.message_overhead(shape.attention_nodes);
    send.max(recv)
}
