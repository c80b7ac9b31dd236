//! Affine fits of compute time against batch size, either from measured
//! profiles or from a synthetic roofline oracle.
//!
//! The synthetic oracle evaluates, per GPU of a tensor-parallel node,
//! `T(b) = max(flops(b) / F, bytes(b) / BW) + c0` where flops and bytes come
//! from the attention GEMMs (QKV projection, output projection) plus KV-cache
//! reads, or from the two expert GEMMs. Tensor-parallel synchronization is not
//! modelled separately; it is absorbed by the fitted slope when profiles are
//! used.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CommBackend, CostModel, UtilCurve};
use crate::catalog::{GpuSpec, MoeModelSpec, WorkloadSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitKind {
    Attention,
    Expert,
}

impl fmt::Display for FitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitKind::Attention => "attention",
            FitKind::Expert => "expert",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub kind: FitKind,
    /// Seconds per token.
    pub slope: f64,
    /// Seconds.
    pub intercept: f64,
    /// Root-mean-square residual, seconds.
    pub rms_residual: f64,
    pub points: usize,
}

impl AffineFit {
    pub fn eval(&self, batch: f64) -> f64 {
        self.slope * batch + self.intercept
    }
}

/// Least-squares fit of `seconds = slope * batch + intercept`.
///
/// The intercept is constrained to be non-negative: if the unconstrained fit
/// goes below zero the line is refitted through the origin.
pub fn calibrate(points: &[(f64, f64)], kind: FitKind) -> Result<AffineFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "{kind} fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid(format!("{kind} profile"), "non-finite value"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 || points.iter().all(|p| p.0 == points[0].0) {
        return Err(Error::DegenerateFit(format!(
            "{kind} fit needs at least 2 distinct batch sizes"
        )));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let mut slope = sxy / sxx;
    let mut intercept = my - slope * mx;
    if intercept < 0.0 {
        let num: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let den: f64 = points.iter().map(|p| p.0 * p.0).sum();
        slope = num / den;
        intercept = 0.0;
    }
    let rms_residual = (points
        .iter()
        .map(|p| (slope * p.0 + intercept - p.1).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(AffineFit {
        kind,
        slope,
        intercept,
        rms_residual,
        points: points.len(),
    })
}

/// Produces a [`CostModel`] for a concrete attention/expert hardware setup.
pub trait CostSource: Sync {
    fn cost_model(
        &self,
        model: &MoeModelSpec,
        workload: &WorkloadSpec,
        attn: (&GpuSpec, u32),
        expert: (&GpuSpec, u32),
    ) -> Result<CostModel>;
}

/// A fixed, already calibrated model applies to every setup.
impl CostSource for CostModel {
    fn cost_model(
        &self,
        _model: &MoeModelSpec,
        workload: &WorkloadSpec,
        _attn: (&GpuSpec, u32),
        _expert: (&GpuSpec, u32),
    ) -> Result<CostModel> {
        let cm = if self.alpha > 0.0 {
            self.at_seq_len(f64::from(workload.avg_seq_len))
        } else {
            self.clone()
        };
        cm.validate()?;
        Ok(cm)
    }
}

/// Synthetic profile generator based on the roofline bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineOracle {
    /// Fixed per-invocation overhead `c0` (kernel launches), seconds.
    pub overhead: f64,
    pub attention_batches: Vec<u64>,
    pub expert_batches: Vec<u64>,
    pub util_curve: UtilCurve,
    pub comm_backend: CommBackend,
}

impl Default for RooflineOracle {
    fn default() -> Self {
        RooflineOracle {
            overhead: 20e-6,
            attention_batches: (1..=32).map(|i| 16 * i).collect(),
            expert_batches: (1..=64).map(|i| 16 * i).collect(),
            util_curve: UtilCurve::default(),
            comm_backend: CommBackend::default(),
        }
    }
}

/// FLOPs and bytes moved by one GPU of a `tp`-way attention node for `b` requests.
pub fn attention_work(b: f64, model: &MoeModelSpec, seq_len: f64, tp: u32) -> (f64, f64) {
    let h = f64::from(model.hidden);
    let g = f64::from(model.gqa_group);
    let tp = f64::from(tp);
    let bytes = f64::from(model.bytes_per_param);
    let qkv_out = h * (1.0 + 2.0 / g) / tp;
    // QKV project (b,h)x(h, h(1+2/g)/tp) and Attn Output (b,h/tp)x(h/tp,h)
    let flops = 2.0 * b * h * qkv_out + 2.0 * b * (h / tp) * h;
    let weights = h * qkv_out + (h / tp) * h;
    let activations = b * (h + qkv_out) + b * (h / tp + h);
    let kv = 2.0 * b * seq_len * h / (g * tp);
    (flops, bytes * (weights + activations + kv))
}

/// FLOPs and bytes moved by one GPU of a `tp`-way expert node for `b` tokens.
pub fn expert_work(b: f64, model: &MoeModelSpec, tp: u32) -> (f64, f64) {
    let h = f64::from(model.hidden);
    let hi = f64::from(model.intermediate) / f64::from(tp);
    let bytes = f64::from(model.bytes_per_param);
    // FFN Input (b,h)x(h,h'/tp) and FFN Output (b,h'/tp)x(h'/tp,h)
    let flops = 4.0 * b * h * hi;
    let weights = 2.0 * h * hi;
    let activations = 2.0 * b * (h + hi);
    (flops, bytes * (weights + activations))
}

impl RooflineOracle {
    fn roofline(&self, (flops, bytes): (f64, f64), gpu: &GpuSpec) -> f64 {
        (flops / gpu.compute).max(bytes / gpu.mem_bandwidth) + self.overhead
    }

    pub fn attention_time(&self, b: f64, model: &MoeModelSpec, seq_len: f64, gpu: &GpuSpec, tp: u32) -> f64 {
        self.roofline(attention_work(b, model, seq_len, tp), gpu)
    }

    pub fn expert_time(&self, b: f64, model: &MoeModelSpec, gpu: &GpuSpec, tp: u32) -> f64 {
        self.roofline(expert_work(b, model, tp), gpu)
    }

    pub fn attention_points(&self, model: &MoeModelSpec, seq_len: f64, gpu: &GpuSpec, tp: u32) -> Vec<(f64, f64)> {
        self.attention_batches
            .iter()
            .map(|&b| (b as f64, self.attention_time(b as f64, model, seq_len, gpu, tp)))
            .collect()
    }

    pub fn expert_points(&self, model: &MoeModelSpec, gpu: &GpuSpec, tp: u32) -> Vec<(f64, f64)> {
        self.expert_batches
            .iter()
            .map(|&b| (b as f64, self.expert_time(b as f64, model, gpu, tp)))
            .collect()
    }

    /// The compute-bound subset of [`RooflineOracle::expert_points`], or all
    /// of them when fewer than two samples are compute-bound.
    pub fn compute_bound_expert_points(&self, model: &MoeModelSpec, gpu: &GpuSpec, tp: u32) -> Vec<(f64, f64)> {
        let tail: Vec<(f64, f64)> = self
            .expert_batches
            .iter()
            .filter(|&&b| {
                let (flops, bytes) = expert_work(b as f64, model, tp);
                flops / gpu.compute >= bytes / gpu.mem_bandwidth
            })
            .map(|&b| (b as f64, self.expert_time(b as f64, model, gpu, tp)))
            .collect();
        if tail.len() >= 2 {
            tail
        } else {
            self.expert_points(model, gpu, tp)
        }
    }
}

impl CostSource for RooflineOracle {
    /// Fits attention at the workload's context length `s` and at `2s`, which
    /// separates the context-proportional slope `alpha` from `beta`. Experts
    /// are fitted on their compute-bound samples: disaggregation exists to run
    /// them there, and a fit across the knee inflates `k4`.
    fn cost_model(
        &self,
        model: &MoeModelSpec,
        workload: &WorkloadSpec,
        (gpu_a, tp_a): (&GpuSpec, u32),
        (gpu_e, tp_e): (&GpuSpec, u32),
    ) -> Result<CostModel> {
        let s = f64::from(workload.avg_seq_len);
        let at_s = calibrate(&self.attention_points(model, s, gpu_a, tp_a), FitKind::Attention)?;
        let at_2s = calibrate(&self.attention_points(model, 2.0 * s, gpu_a, tp_a), FitKind::Attention)?;
        let exp = calibrate(&self.compute_bound_expert_points(model, gpu_e, tp_e), FitKind::Expert)?;
        let alpha = ((at_2s.slope - at_s.slope) / s).max(0.0);
        let beta = at_s.slope - alpha * s;
        let cm = CostModel {
            k1: at_s.slope,
            k2: at_s.intercept,
            k3: exp.slope,
            k4: exp.intercept,
            alpha,
            beta,
            util_curve: self.util_curve.clone(),
            comm_backend: self.comm_backend.clone(),
        };
        cm.validate()?;
        Ok(cm)
    }
}

/// Measured data read from a profile CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub attention: Vec<(f64, f64)>,
    pub expert: Vec<(f64, f64)>,
    /// `(message_bytes, utilization)`.
    pub util: Vec<(f64, f64)>,
}

impl Profile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("kind") || header.len() != 3 {
            return Err(Error::Parse {
                context: "profile header".into(),
                message: "expected 'kind,batch,seconds' or 'kind,message_bytes,utilization'".into(),
            });
        }
        let mut p = Profile::default();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |i: usize| -> Result<f64> {
                let raw = rec.get(i).unwrap_or("");
                raw.parse::<f64>().map_err(|e| Error::Parse {
                    context: format!("profile line {line}, column {}", i + 1),
                    message: format!("'{raw}': {e}"),
                })
            };
            let (x, y) = (num(1)?, num(2)?);
            match rec.get(0).unwrap_or("").to_ascii_lowercase().as_str() {
                "attention" | "attn" => p.attention.push((x, y)),
                "expert" | "ffn" => p.expert.push((x, y)),
                "util" | "utilization" => p.util.push((x, y)),
                other => {
                    return Err(Error::Parse {
                        context: format!("profile line {line}, column 1"),
                        message: format!("unknown kind '{other}'"),
                    })
                }
            }
        }
        Ok(p)
    }

    /// Fits both compute models; the utilization table, if present, replaces the default curve.
    pub fn cost_model(&self, backend: CommBackend) -> Result<(CostModel, AffineFit, AffineFit)> {
        let a = calibrate(&self.attention, FitKind::Attention)?;
        let e = calibrate(&self.expert, FitKind::Expert)?;
        let util_curve = if self.util.is_empty() {
            UtilCurve::default()
        } else {
            UtilCurve::table(self.util.clone())?
        };
        let cm = CostModel {
            util_curve,
            comm_backend: backend,
            ..CostModel::affine(a.slope, a.intercept, e.slope, e.intercept)
        };
        cm.validate()?;
        Ok((cm, a, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    let context = match e.position() {
        Some(p) => format!("profile line {}", p.line()),
        None => "profile".to_string(),
    };
    Error::Parse {
        context,
        message: e.to_string(),
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<Profile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Profile::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{builtin_catalog, builtin_model};
    use proptest::prelude::*;

    #[test]
    fn exact_two_point_fit() {
        let (k, c) = (3e-6, 40e-6);
        let fit = calibrate(&[(1.0, k + c), (2.0, 2.0 * k + c)], FitKind::Expert).unwrap();
        assert!((fit.slope - k).abs() < 1e-18);
        assert!((fit.intercept - c).abs() < 1e-18);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            calibrate(&[(4.0, 1.0)], FitKind::Attention),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            calibrate(&[(4.0, 1.0), (4.0, 2.0)], FitKind::Attention),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn memory_bound_attention_slope_is_bytes_per_token_over_bandwidth() {
        let m = builtin_model("Mixtral-8x22B").unwrap();
        let g = &builtin_catalog()["A800"];
        let s = 730.0;
        let oracle = RooflineOracle::default();
        // confirm every sample is memory bound
        for &b in &oracle.attention_batches {
            let (f, by) = attention_work(b as f64, &m, s, 2);
            assert!(by / g.mem_bandwidth > f / g.compute);
        }
        let fit = calibrate(&oracle.attention_points(&m, s, g, 2), FitKind::Attention).unwrap();
        let per_token = attention_work(1.0, &m, s, 2).1 - attention_work(0.0, &m, s, 2).1;
        let expected = per_token / g.mem_bandwidth;
        assert!((fit.slope - expected).abs() / expected < 1e-6);
    }

    fn memory_bound(work: (f64, f64), gpu: &GpuSpec) -> bool {
        work.1 / gpu.mem_bandwidth >= work.0 / gpu.compute
    }

    #[test]
    fn synthetic_prediction_on_held_out_batches_in_one_regime() {
        let oracle = RooflineOracle::default();
        let cat = builtin_catalog();
        let w = WorkloadSpec::default();
        let held_out = [20.0, 77.0, 133.0, 301.0, 450.0];
        let mut checked = 0;
        for m in crate::catalog::builtin_models() {
            for gpu in cat.iter() {
                let single_regime = oracle
                    .attention_batches
                    .iter()
                    .all(|&b| memory_bound(attention_work(b as f64, &m, 730.0, 2), gpu));
                if !single_regime {
                    continue;
                }
                checked += 1;
                let cm = oracle.cost_model(&m, &w, (gpu, 2), (gpu, 2)).unwrap();
                for b in held_out {
                    let truth = oracle.attention_time(b, &m, 730.0, gpu, 2);
                    let pred = crate::perf_model::attention_time(b, &cm);
                    assert!((pred - truth).abs() / truth < 0.05, "{} {} b={b}", m.name, gpu.name);
                }
            }
        }
        assert!(checked >= 6, "only {checked} single-regime setups");
    }

    #[test]
    fn synthetic_expert_fit_tracks_compute_bound_tail() {
        let oracle = RooflineOracle::default();
        let cat = builtin_catalog();
        let w = WorkloadSpec::default();
        for m in crate::catalog::builtin_models() {
            for gpu in cat.iter() {
                let cm = oracle.cost_model(&m, &w, (gpu, 1), (gpu, 1)).unwrap();
                let knee = (1..=1024)
                    .find(|&b| !memory_bound(expert_work(f64::from(b), &m, 1), gpu))
                    .unwrap_or(1024);
                for b in [650.0, 777.0, 900.0, 1000.0] {
                    if b < 1.5 * f64::from(knee) {
                        continue;
                    }
                    let truth = oracle.expert_time(b, &m, gpu, 1);
                    let pred = crate::perf_model::expert_time(b, &cm);
                    let err = (pred - truth).abs() / truth;
                    assert!(err < 0.10, "{} {} b={b}: {err}", m.name, gpu.name);
                }
            }
        }
    }

    #[test]
    fn alpha_beta_reproduce_slope() {
        let m = builtin_model("DBRX").unwrap();
        let g = &builtin_catalog()["H20"];
        let w = WorkloadSpec::default();
        let cm = RooflineOracle::default().cost_model(&m, &w, (g, 1), (g, 1)).unwrap();
        assert!(cm.alpha > 0.0);
        assert!((cm.at_seq_len(730.0).k1 - cm.k1).abs() / cm.k1 < 1e-9);
        assert!(cm.at_seq_len(1460.0).k1 > cm.k1);
    }

    #[test]
    fn profile_parsing() {
        let text = "kind,batch,seconds\nattention,1,0.0011\nattention,2,0.0012\nexpert,8,0.002\nexpert,16,0.003\nutil,1000,0.1\nutil,100000,0.9\n";
        let p = Profile::parse(text).unwrap();
        assert_eq!(p.attention.len(), 2);
        assert_eq!(p.util.len(), 2);
        let (cm, a, _) = p.cost_model(CommBackend::ideal()).unwrap();
        assert!((a.slope - 1e-4).abs() < 1e-12);
        assert!(matches!(cm.util_curve, UtilCurve::Table { .. }));

        let err = Profile::parse("kind,batch,seconds\nattention,x,1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(Profile::parse("kind,batch,seconds\nbogus,1,1\n").is_err());
        assert!(Profile::parse("batch,seconds\n1,1\n").is_err());
    }

    proptest! {
        #[test]
        fn noiseless_affine_recovery(k in 1e-7f64..1e-3, c in 0.0f64..1e-2, n in 2usize..40, step in 1u32..64) {
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let x = f64::from(step) * (i as f64 + 1.0);
                    (x, k * x + c)
                })
                .collect();
            let fit = calibrate(&pts, FitKind::Attention).unwrap();
            prop_assert!((fit.slope - k).abs() <= 1e-9 * k);
            prop_assert!((fit.intercept - c).abs() <= 1e-9 * (c + k * f64::from(step) * n as f64));
        }
    }
}
