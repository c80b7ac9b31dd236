//! Hardware catalog, model architectures, workload statistics and search limits.
//!
//! Every type here is an immutable value once validated. The builtin catalog
//! and model list carry the published accelerator and model figures; user
//! files in JSON can replace or override any of them (see `docs/config.md`).

use std::fmt;
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GB: f64 = 1e9;
pub const TFLOPS: f64 = 1e12;

/// One accelerator type.
///
/// Units are SI base units: bytes, bytes/second, FLOP/second, watts. `price`
/// is a dimensionless relative cost; only ratios between entries matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub name: String,
    pub price: f64,
    pub mem_capacity: u64,
    pub mem_bandwidth: f64,
    /// Dense bf16 throughput.
    pub compute: f64,
    pub net_bandwidth_per_gpu: f64,
    /// `None` when the power draw is not known; such entries are skipped by
    /// power-metric searches.
    #[serde(default)]
    pub max_power: Option<f64>,
    #[serde(default = "default_gpus_per_node")]
    pub max_gpus_per_node: u32,
}

fn default_gpus_per_node() -> u32 {
    8
}

impl GpuSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("hardware[{}].{f}", self.name);
        if self.name.trim().is_empty() {
            return Err(Error::invalid("hardware.name", "must not be empty"));
        }
        for (f, v) in [
            ("price", self.price),
            ("mem_bandwidth", self.mem_bandwidth),
            ("compute", self.compute),
            ("net_bandwidth_per_gpu", self.net_bandwidth_per_gpu),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field(f), format!("must be > 0 (got {v})")));
            }
        }
        if self.mem_capacity == 0 {
            return Err(Error::invalid(field("mem_capacity"), "must be > 0"));
        }
        if let Some(p) = self.max_power {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid(field("max_power"), format!("must be > 0 (got {p})")));
            }
        }
        if ![1, 2, 4, 8].contains(&self.max_gpus_per_node) {
            return Err(Error::invalid(
                field("max_gpus_per_node"),
                format!("must be one of 1, 2, 4, 8 (got {})", self.max_gpus_per_node),
            ));
        }
        Ok(())
    }

    /// Cost of one GPU under the given metric, `None` if the metric is unknown for this entry.
    pub fn unit_cost(&self, metric: CostMetric) -> Option<f64> {
        match metric {
            CostMetric::Price => Some(self.price),
            CostMetric::Power => self.max_power,
        }
    }
}

/// An ordered set of accelerator types with case-insensitive lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    entries: Vec<GpuSpec>,
}

impl Catalog {
    pub fn new(entries: Vec<GpuSpec>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("hardware", "catalog must not be empty"));
        }
        for (i, g) in entries.iter().enumerate() {
            g.validate()?;
            if entries[..i].iter().any(|o| o.name.eq_ignore_ascii_case(&g.name)) {
                return Err(Error::invalid("hardware", format!("duplicate entry '{}'", g.name)));
            }
        }
        Ok(Catalog { entries })
    }

    pub fn get(&self, name: &str) -> Option<&GpuSpec> {
        self.entries.iter().find(|g| g.name.eq_ignore_ascii_case(name))
    }

    pub fn lookup(&self, name: &str) -> Result<&GpuSpec> {
        self.get(name).ok_or_else(|| Error::Unknown {
            kind: "GPU",
            name: name.to_string(),
        })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GpuSpec> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Index<&str> for Catalog {
    type Output = GpuSpec;

    fn index(&self, name: &str) -> &GpuSpec {
        self.get(name)
            .unwrap_or_else(|| panic!("no GPU named '{name}' in catalog"))
    }
}

impl<'a> IntoIterator for &'a Catalog {
    type Item = &'a GpuSpec;
    type IntoIter = std::slice::Iter<'a, GpuSpec>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Accelerators with normalized prices (L20 = 1.00).
///
/// Network bandwidth per GPU is not part of the price table; the values here
/// follow the NIC provisioning of common 8-GPU servers of each type and can be
/// overridden from a config file.
pub fn builtin_catalog() -> Catalog {
    let gpu =
        |name: &str, price: f64, cap_gb: u64, bw_gbs: f64, tflops: f64, net_gbs: f64, power: Option<f64>| GpuSpec {
            name: name.to_string(),
            price,
            mem_capacity: cap_gb * 1_000_000_000,
            mem_bandwidth: bw_gbs * GB,
            compute: tflops * TFLOPS,
            net_bandwidth_per_gpu: net_gbs * GB,
            max_power: power,
            max_gpus_per_node: 8,
        };
    Catalog {
        entries: vec![
            gpu("L20", 1.00, 48, 864.0, 119.5, 12.5, None),
            gpu("H800", 5.28, 80, 3430.4, 989.0, 50.0, None),
            gpu("A800", 2.26, 80, 2039.0, 312.0, 25.0, None),
            gpu("H20", 1.85, 96, 4096.0, 148.0, 25.0, Some(500.0)),
            gpu("L40S", 1.08, 48, 864.0, 362.0, 12.5, Some(350.0)),
        ],
    }
}

/// MoE transformer architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeModelSpec {
    pub name: String,
    pub layers: u32,
    pub hidden: u32,
    pub intermediate: u32,
    pub experts: u32,
    pub topk: u32,
    /// Query heads per KV group.
    pub gqa_group: u32,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u32,
    /// Optional attention head size; only used to check `gqa_group`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u32>,
}

fn default_bytes_per_param() -> u32 {
    2
}

impl MoeModelSpec {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("model.{name}");
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("experts", self.experts),
            ("gqa_group", self.gqa_group),
            ("bytes_per_param", self.bytes_per_param),
        ] {
            if v == 0 {
                return Err(Error::invalid(f(name), "must be > 0"));
            }
        }
        if self.topk == 0 || self.topk > self.experts {
            return Err(Error::invalid(
                f("topk"),
                format!(
                    "K out of range: need 1 <= K <= E (got K = {}, E = {})",
                    self.topk, self.experts
                ),
            ));
        }
        if let Some(d) = self.head_dim {
            if d == 0 || !self.hidden.is_multiple_of(d) {
                return Err(Error::invalid(f("head_dim"), "must divide hidden"));
            }
            let heads = self.hidden / d;
            if !heads.is_multiple_of(self.gqa_group) {
                return Err(Error::invalid(
                    f("gqa_group"),
                    format!("must divide the query-head count {heads}"),
                ));
            }
        }
        Ok(())
    }
}

/// Mixtral-8x22B, DBRX and Scaled-MoE.
///
/// Group sizes: Mixtral and DBRX use 48 query heads over 8 KV heads; the
/// scaled model is taken as 64 over 8.
pub fn builtin_models() -> Vec<MoeModelSpec> {
    let m = |name: &str, layers, hidden, intermediate, experts, topk, gqa_group| MoeModelSpec {
        name: name.to_string(),
        layers,
        hidden,
        intermediate,
        experts,
        topk,
        gqa_group,
        bytes_per_param: 2,
        head_dim: Some(128),
    };
    vec![
        m("Mixtral-8x22B", 56, 6144, 16384, 8, 2, 6),
        m("DBRX", 40, 6144, 10752, 16, 4, 6),
        m("Scaled-MoE", 48, 8192, 8192, 32, 4, 8),
    ]
}

fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Case-insensitive lookup of a builtin model; `mixtral` is accepted for Mixtral-8x22B.
pub fn builtin_model(name: &str) -> Result<MoeModelSpec> {
    let key = normalize(name);
    builtin_models()
        .into_iter()
        .find(|m| {
            let n = normalize(&m.name);
            n == key || (key == "mixtral" && n.starts_with("mixtral"))
        })
        .ok_or_else(|| Error::Unknown {
            kind: "model",
            name: name.to_string(),
        })
}

/// Lookup by name in a list of models (builtin or otherwise).
pub trait ByName {
    type Item;
    fn by_name(&self, name: &str) -> Option<&Self::Item>;
}

impl ByName for [MoeModelSpec] {
    type Item = MoeModelSpec;
    fn by_name(&self, name: &str) -> Option<&MoeModelSpec> {
        let key = normalize(name);
        self.iter().find(|m| normalize(&m.name) == key)
    }
}

impl ByName for Vec<MoeModelSpec> {
    type Item = MoeModelSpec;
    fn by_name(&self, name: &str) -> Option<&MoeModelSpec> {
        self.as_slice().by_name(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Average context length per decoding request (tokens).
    #[serde(default = "default_seq_len")]
    pub avg_seq_len: u32,
    /// Time-between-tokens bound, seconds.
    #[serde(default = "default_slo")]
    pub slo_tbt: f64,
    #[serde(default = "default_input_len")]
    pub input_len_median: u32,
    #[serde(default = "default_output_len")]
    pub output_len_median: u32,
}

fn default_input_len() -> u32 {
    571
}
fn default_output_len() -> u32 {
    159
}
// Full context at the last decoding step, so KV-cache sizing is not optimistic.
fn default_seq_len() -> u32 {
    default_input_len() + default_output_len()
}
fn default_slo() -> f64 {
    0.150
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            avg_seq_len: default_seq_len(),
            slo_tbt: default_slo(),
            input_len_median: default_input_len(),
            output_len_median: default_output_len(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.avg_seq_len == 0 {
            return Err(Error::invalid("workload.avg_seq_len", "must be > 0"));
        }
        if !(self.slo_tbt > 0.0) {
            return Err(Error::invalid(
                "workload.slo_tbt",
                format!("must be > 0 (got {})", self.slo_tbt),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CostMetric {
    #[default]
    Price,
    Power,
}

impl fmt::Display for CostMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMetric::Price => "price",
            CostMetric::Power => "power",
        })
    }
}

impl std::str::FromStr for CostMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "price" | "cost" => Ok(CostMetric::Price),
            "power" => Ok(CostMetric::Power),
            _ => Err(Error::invalid(
                "cost_metric",
                format!("expected price or power, got '{s}'"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchLimits {
    #[serde(default = "default_max_microbatches")]
    pub max_microbatches: u32,
    #[serde(default)]
    pub cost_metric: CostMetric,
    /// Allowed |T_a - T_e| / T_f for a plan to count as balanced.
    #[serde(default = "default_balance_slack")]
    pub balance_slack: f64,
    /// Multiplier on the average expert micro-batch; 1.0 plans for the mean
    /// fan-out, larger values plan for a hot expert.
    #[serde(default = "default_expert_imbalance")]
    pub expert_imbalance: f64,
}

fn default_max_microbatches() -> u32 {
    4
}
fn default_balance_slack() -> f64 {
    0.10
}
fn default_expert_imbalance() -> f64 {
    1.0
}

impl Default for SearchLimits {
    fn default() -> Self {
        SearchLimits {
            max_microbatches: default_max_microbatches(),
            cost_metric: CostMetric::default(),
            balance_slack: default_balance_slack(),
            expert_imbalance: default_expert_imbalance(),
        }
    }
}

impl SearchLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_microbatches < 3 {
            return Err(Error::invalid(
                "limits.max_microbatches",
                format!("must be >= 3 (got {})", self.max_microbatches),
            ));
        }
        if !(self.balance_slack >= 0.0) {
            return Err(Error::invalid("limits.balance_slack", "must be >= 0"));
        }
        if !(self.expert_imbalance >= 1.0) {
            return Err(Error::invalid("limits.expert_imbalance", "must be >= 1"));
        }
        Ok(())
    }
}

/// A fully validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub hardware: Catalog,
    pub model: MoeModelSpec,
    pub workload: WorkloadSpec,
    pub limits: SearchLimits,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ModelRef {
    Name(String),
    Spec(MoeModelSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    hardware: Option<Vec<GpuSpec>>,
    model: ModelRef,
    #[serde(default)]
    workload: WorkloadSpec,
    #[serde(default)]
    limits: SearchLimits,
}

impl Config {
    /// Builtin catalog, default workload and limits for a builtin model.
    pub fn for_builtin(model: &str) -> Result<Self> {
        Ok(Config {
            hardware: builtin_catalog(),
            model: builtin_model(model)?,
            workload: WorkloadSpec::default(),
            limits: SearchLimits::default(),
        })
    }

    /// Parses and validates a JSON document.
    ///
    /// `model` is either a builtin name or a full architecture object;
    /// `hardware`, when present, replaces the builtin catalog.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Parse {
                context: format!("field '{path}' (line {}, column {})", inner.line(), inner.column()),
                message: inner.to_string(),
            }
        })?;
        let hardware = match raw.hardware {
            Some(entries) => Catalog::new(entries)?,
            None => builtin_catalog(),
        };
        let model = match raw.model {
            ModelRef::Name(n) => builtin_model(&n)?,
            ModelRef::Spec(s) => s,
        };
        model.validate()?;
        raw.workload.validate()?;
        raw.limits.validate()?;
        Ok(Config {
            hardware,
            model,
            workload: raw.workload,
            limits: raw.limits,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<(Catalog, MoeModelSpec, WorkloadSpec, SearchLimits)> {
    let c = load_config_file(path)?;
    Ok((c.hardware, c.model, c.workload, c.limits))
}

pub fn load_config_file(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Config::from_json(&text).map_err(|e| match e {
        Error::Parse { context, message } => Error::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}
