use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Row {
    layer: u32,
    expert_id: usize,
    token_count: f64,
}

/// Per-layer token counts of every expert.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadTrace {
    /// Layer to per-expert counts; experts absent from the trace count zero.
    pub layers: BTreeMap<u32, Vec<f64>>,
}

impl LoadTrace {
    /// Reads CSV with header `layer,expert_id,token_count`. Repeated
    /// `(layer, expert_id)` rows accumulate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut trace = LoadTrace::default();
        for (n, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| {
                let line = e.position().map_or(n as u64 + 2, |p| p.line());
                Error::Parse {
                    context: format!("load trace line {line}"),
                    message: e.to_string(),
                }
            })?;
            if !(row.token_count.is_finite() && row.token_count >= 0.0) {
                return Err(Error::Parse {
                    context: format!("load trace line {}", n + 2),
                    message: format!("token_count must be >= 0 (got {})", row.token_count),
                });
            }
            let counts = trace.layers.entry(row.layer).or_default();
            if counts.len() <= row.expert_id {
                counts.resize(row.expert_id + 1, 0.0);
            }
            counts[row.expert_id] += row.token_count;
        }
        if trace.layers.is_empty() {
            return Err(Error::Parse {
                context: "load trace".into(),
                message: "no rows".into(),
            });
        }
        let experts = trace.experts();
        for counts in trace.layers.values_mut() {
            counts.resize(experts, 0.0);
        }
        Ok(trace)
    }

    pub fn experts(&self) -> usize {
        self.layers.values().map(Vec::len).max().unwrap_or(0)
    }

    pub fn layer(&self, layer: u32) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    /// Per-expert counts summed over layers.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.experts()];
        for counts in self.layers.values() {
            for (o, c) in out.iter_mut().zip(counts) {
                *o += c;
            }
        }
        out
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<LoadTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LoadTrace::parse(&text)
}
