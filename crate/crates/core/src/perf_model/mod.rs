//! Analytical cost models for one MoE layer of one micro-batch.
//!
//! Attention and expert compute times are affine in the per-node micro-batch
//! size (`T_a = k1 * b_a + k2`, `T_e = k3 * b_e + k4`). The attention slope
//! depends on the context length through `k1 = alpha * s + beta`.
//! Communication time follows the bandwidth/utilization model in [`comm`],
//! and memory feasibility is checked in exact integer arithmetic in
//! [`memory`].
//!
//! Gating-network parameters and FLOPs are not counted anywhere in this
//! module; they are small next to the attention projections and experts.

pub mod calibrate;
pub mod comm;
pub mod memory;
pub mod roofline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{calibrate, load_profile, AffineFit, CostSource, FitKind, Profile, RooflineOracle};
pub use comm::{comm_time, pair_message_bytes, CommShape};
pub use memory::{kv_cache_check, param_sizes, MemoryReport, ParamSizes};
pub use roofline::{ffn_utilization, gemm_flops, min_compute_bound_batch};

/// Network bandwidth utilization as a function of message size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UtilCurve {
    /// `Util(x) = x / (x + s_half)`.
    Saturating { s_half: f64 },
    /// Piecewise-linear in message size; clamped to the end points outside the table.
    Table { points: Vec<(f64, f64)> },
}

impl Default for UtilCurve {
    fn default() -> Self {
        UtilCurve::Saturating { s_half: 64.0 * 1024.0 }
    }
}

impl UtilCurve {
    pub fn table(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let c = UtilCurve::Table { points };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UtilCurve::Saturating { s_half } => {
                if !(s_half.is_finite() && *s_half >= 0.0) {
                    return Err(Error::invalid("util_curve.s_half", "must be >= 0"));
                }
            }
            UtilCurve::Table { points } => {
                if points.is_empty() {
                    return Err(Error::invalid("util_curve", "table must not be empty"));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::invalid(
                            "util_curve",
                            "message sizes must be strictly increasing",
                        ));
                    }
                    if w[1].1 < w[0].1 {
                        return Err(Error::invalid(
                            "util_curve",
                            "utilization must be non-decreasing in message size",
                        ));
                    }
                }
                if points.iter().any(|&(x, u)| x < 0.0 || !(u > 0.0 && u <= 1.0)) {
                    return Err(Error::invalid("util_curve", "utilization must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Utilization at message size `bytes`.
    pub fn eval(&self, bytes: f64) -> f64 {
        match self {
            UtilCurve::Saturating { s_half } => {
                if *s_half == 0.0 {
                    1.0
                } else {
                    bytes / (bytes + s_half)
                }
            }
            UtilCurve::Table { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if bytes <= first.0 {
                    return first.1;
                }
                if bytes >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|p| p.0 <= bytes);
                let (x0, u0) = points[i - 1];
                let (x1, u1) = points[i];
                u0 + (u1 - u0) * (bytes - x0) / (x1 - x0)
            }
        }
    }

    /// Seconds to move `bytes` at peak bandwidth `bw` (bytes/s) after utilization losses.
    pub fn transfer_time(&self, bytes: f64, bw: f64) -> f64 {
        if bytes <= 0.0 {
            return 0.0;
        }
        match self {
            // x / (W * x/(x+s)) simplifies; this form stays exact for tiny x.
            UtilCurve::Saturating { s_half } => (bytes + s_half) / bw,
            UtilCurve::Table { .. } => bytes / (bw * self.eval(bytes)),
        }
    }
}

/// Behavioural model of a token dispatch/combine library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommBackend {
    pub name: String,
    /// Added to every message, seconds.
    pub base_overhead: f64,
    /// Extra seconds per receiver beyond `receiver_threshold`.
    pub per_receiver_penalty: f64,
    pub receiver_threshold: u32,
    /// Ratio of p99 to p50 message latency; 1 means no jitter.
    pub jitter_p99_factor: f64,
}

impl CommBackend {
    /// No overhead, no jitter.
    pub fn ideal() -> Self {
        CommBackend {
            name: "ideal".into(),
            base_overhead: 0.0,
            per_receiver_penalty: 0.0,
            receiver_threshold: 0,
            jitter_p99_factor: 1.0,
        }
    }

    /// Copy-free RDMA library with a tight tail.
    pub fn optimized() -> Self {
        CommBackend {
            name: "optimized".into(),
            base_overhead: 15e-6,
            per_receiver_penalty: 0.0,
            receiver_threshold: 0,
            jitter_p99_factor: 1.1,
        }
    }

    /// Collective-style library with group setup, staging copies and an unstable tail.
    pub fn legacy() -> Self {
        CommBackend {
            name: "legacy".into(),
            base_overhead: 80e-6,
            per_receiver_penalty: 4e-6,
            receiver_threshold: 8,
            jitter_p99_factor: 3.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ideal" => Ok(Self::ideal()),
            "optimized" => Ok(Self::optimized()),
            "legacy" => Ok(Self::legacy()),
            _ => Err(Error::Unknown {
                kind: "communication backend",
                name: name.into(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_overhead >= 0.0) || !(self.per_receiver_penalty >= 0.0) {
            return Err(Error::invalid("comm_backend", "overheads must be >= 0"));
        }
        if !(self.jitter_p99_factor >= 1.0) {
            return Err(Error::invalid("comm_backend.jitter_p99_factor", "must be >= 1"));
        }
        Ok(())
    }

    /// Fixed per-message cost for a message fanned out to `receivers` peers.
    pub fn message_overhead(&self, receivers: u32) -> f64 {
        let extra = receivers.saturating_sub(self.receiver_threshold);
        self.base_overhead + self.per_receiver_penalty * f64::from(extra)
    }
}

impl Default for CommBackend {
    fn default() -> Self {
        Self::optimized()
    }
}

/// Calibrated coefficients for one (attention GPU, tp_a, expert GPU, tp_e) setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Attention seconds per token at the reference context length.
    pub k1: f64,
    pub k2: f64,
    /// Expert seconds per token.
    pub k3: f64,
    pub k4: f64,
    /// Context-length dependence of `k1`: `k1 = alpha * s + beta`.
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub util_curve: UtilCurve,
    #[serde(default)]
    pub comm_backend: CommBackend,
}

impl CostModel {
    /// Builds a model whose attention slope has no context-length term.
    pub fn affine(k1: f64, k2: f64, k3: f64, k4: f64) -> Self {
        CostModel {
            k1,
            k2,
            k3,
            k4,
            alpha: 0.0,
            beta: k1,
            util_curve: UtilCurve::default(),
            comm_backend: CommBackend::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k3 > 0.0) {
            return Err(Error::invalid("cost_model", "k1 and k3 must be > 0"));
        }
        if !(self.k2 >= 0.0 && self.k4 >= 0.0) {
            return Err(Error::invalid("cost_model", "k2 and k4 must be >= 0"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("cost_model.alpha", "must be >= 0"));
        }
        self.util_curve.validate()?;
        self.comm_backend.validate()
    }

    /// Re-targets the attention slope to context length `s`.
    pub fn at_seq_len(&self, s: f64) -> Self {
        let mut c = self.clone();
        c.k1 = self.alpha * s + self.beta;
        c
    }

    pub fn with_backend(mut self, backend: CommBackend) -> Self {
        self.comm_backend = backend;
        self
    }

    /// Per-request attention cost for a request with context length `seq_len`.
    pub fn request_cost(&self, seq_len: f64) -> f64 {
        self.alpha * seq_len + self.beta
    }
}

/// `T_a = k1 * b_a + k2`.
pub fn attention_time(b_a: f64, cm: &CostModel) -> f64 {
    cm.k1 * b_a + cm.k2
}

/// `T_e = k3 * b_e + k4`.
pub fn expert_time(b_e: f64, cm: &CostModel) -> f64 {
    cm.k3 * b_e + cm.k4
}
