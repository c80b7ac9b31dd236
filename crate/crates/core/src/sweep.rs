//! One-variable studies around a fixed deployment.
//!
//! Every row holds the attention micro-batch size `b_a` fixed and runs the
//! event simulator, so throughput is `m * n_a * b_a / T_total` and the idle
//! fractions come from the simulated timeline.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, GpuSpec, MoeModelSpec, SearchLimits, WorkloadSpec};
use crate::error::{Error, Result};
use crate::perf_model::{attention_time, comm_time, expert_time, kv_cache_check, CommShape, CostSource};
use crate::pipeline::{min_microbatches, simulate, StageTimes};
use crate::planner::{search, DeploymentPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Micro-batch count `m`.
    Microbatches,
    /// Attention node count `n_a`.
    DpDegree,
    /// Global batch `m * n_a * b_a`; values must divide evenly.
    BatchSize,
    /// `ATTN/EXPERT` GPU names; each pair is planned from scratch.
    GpuPair,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::Microbatches => "microbatches",
            SweepVariable::DpDegree => "dp_degree",
            SweepVariable::BatchSize => "batch_size",
            SweepVariable::GpuPair => "gpu_pair",
        })
    }
}

impl FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "microbatches" | "m" => Ok(SweepVariable::Microbatches),
            "dp_degree" | "dp" | "n_a" => Ok(SweepVariable::DpDegree),
            "batch_size" | "batch" => Ok(SweepVariable::BatchSize),
            "gpu_pair" | "pair" => Ok(SweepVariable::GpuPair),
            _ => Err(Error::invalid(
                "sweep variable",
                format!("expected microbatches, dp_degree, batch_size or gpu_pair, got '{s}'"),
            )),
        }
    }
}

/// The deployment every sweep row starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub gpu_a: String,
    pub gpu_e: String,
    pub tp_a: u32,
    pub tp_e: u32,
    pub n_a: u32,
    pub m: u32,
    /// Attention micro-batch size, tokens.
    pub b_a: u64,
}

impl SweepBase {
    pub fn from_plan(plan: &DeploymentPlan) -> Self {
        SweepBase {
            gpu_a: plan.gpu_a.clone(),
            gpu_e: plan.gpu_e.clone(),
            tp_a: plan.tp_a,
            tp_e: plan.tp_e,
            n_a: plan.n_a,
            m: plan.m,
            b_a: plan.batch / (u64::from(plan.m) * u64::from(plan.n_a)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    /// Raw values; invalid ones produce unevaluated rows.
    pub range: Vec<String>,
    /// Required for every variable except `gpu_pair`.
    pub fixed: Option<SweepBase>,
}

/// Parses `1,2,4`, `1..4` or `1..=4` (both range forms inclusive).
pub fn parse_range(text: &str) -> Result<Vec<String>> {
    let t = text.trim();
    if let Some((a, b)) = t.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::invalid("sweep range", format!("'{text}': {e}")))
        };
        let (lo, hi) = (parse(a)?, parse(b)?);
        if lo > hi {
            return Err(Error::invalid("sweep range", format!("'{text}' is empty")));
        }
        if hi - lo >= 100_000 {
            return Err(Error::invalid("sweep range", format!("'{text}' has too many values")));
        }
        return Ok((lo..=hi).map(|v| v.to_string()).collect());
    }
    Ok(t.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    /// The point was well formed and simulated; numeric columns are set.
    pub evaluated: bool,
    /// Evaluated and every deployment constraint holds; `note` lists the
    /// ones that do not.
    pub constraints_met: bool,
    pub t_a: Option<f64>,
    pub t_e: Option<f64>,
    pub t_c: Option<f64>,
    pub total_latency: Option<f64>,
    /// Mean simulated per-micro-batch iteration latency (time between tokens).
    pub iter_latency: Option<f64>,
    /// Tokens per second.
    pub throughput: Option<f64>,
    pub throughput_per_gpu: Option<f64>,
    /// Throughput over that of the first evaluated row.
    pub normalized_throughput: Option<f64>,
    pub tpuc: Option<f64>,
    pub attention_idle: Option<f64>,
    pub expert_idle: Option<f64>,
    pub note: String,
}

impl SweepRow {
    fn unevaluated(value: &str, note: impl Into<String>) -> Self {
        SweepRow {
            value: value.to_string(),
            evaluated: false,
            constraints_met: false,
            t_a: None,
            t_e: None,
            t_c: None,
            total_latency: None,
            iter_latency: None,
            throughput: None,
            throughput_per_gpu: None,
            normalized_throughput: None,
            tpuc: None,
            attention_idle: None,
            expert_idle: None,
            note: note.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub variable: SweepVariable,
    pub fixed: Option<SweepBase>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse {
            context: "sweep csv".into(),
            message: e.to_string(),
        };
        for row in &self.rows {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse {
            context: "sweep csv".into(),
            message: e.to_string(),
        })
    }

    pub fn evaluated_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.evaluated)
    }
}

/// Inputs shared by every row.
pub struct SweepContext<'a> {
    pub model: &'a MoeModelSpec,
    pub catalog: &'a Catalog,
    pub costs: &'a dyn CostSource,
    pub workload: &'a WorkloadSpec,
    pub limits: &'a SearchLimits,
}

struct Point<'a> {
    gpu_a: &'a GpuSpec,
    gpu_e: &'a GpuSpec,
    tp_a: u32,
    tp_e: u32,
    n_a: u32,
    m: u32,
    b_a: u64,
}

/// Runs one row per value. Rows are independent and computed in parallel;
/// their order follows `spec.range`.
pub fn run_sweep(ctx: &SweepContext<'_>, spec: &SweepSpec) -> Result<SweepReport> {
    if spec.range.is_empty() {
        return Err(Error::invalid("sweep range", "must contain at least one value"));
    }
    ctx.model.validate()?;
    ctx.workload.validate()?;
    ctx.limits.validate()?;
    let mut rows: Vec<SweepRow> = if spec.variable == SweepVariable::GpuPair {
        spec.range
            .par_iter()
            .map(|value| pair_row(ctx, value))
            .collect::<Result<_>>()?
    } else {
        let base = spec
            .fixed
            .as_ref()
            .ok_or_else(|| Error::invalid("sweep base", format!("required to sweep {}", spec.variable)))?;
        let point = Point {
            gpu_a: ctx.catalog.lookup(&base.gpu_a)?,
            gpu_e: ctx.catalog.lookup(&base.gpu_e)?,
            tp_a: base.tp_a,
            tp_e: base.tp_e,
            n_a: base.n_a,
            m: base.m,
            b_a: base.b_a,
        };
        if [point.tp_a, point.tp_e, point.n_a, point.m].contains(&0) || point.b_a == 0 {
            return Err(Error::invalid("sweep base", "tp_a, tp_e, n_a, m and b_a must be >= 1"));
        }
        spec.range
            .par_iter()
            .map(|value| row_for(ctx, spec.variable, &point, value))
            .collect::<Result<_>>()?
    };

    let reference = rows.iter().find_map(|r| r.throughput);
    for r in &mut rows {
        r.normalized_throughput = match (r.throughput, reference) {
            (Some(t), Some(t0)) if t0 > 0.0 => Some(t / t0),
            _ => None,
        };
    }
    Ok(SweepReport {
        variable: spec.variable,
        fixed: spec.fixed.clone(),
        rows,
    })
}

fn positive(value: &str) -> std::result::Result<u64, String> {
    match value.parse::<u64>() {
        Ok(0) => Err("must be >= 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(format!("not a positive integer: {e}")),
    }
}

fn small(v: u64) -> std::result::Result<u32, String> {
    u32::try_from(v).map_err(|_| "too large".to_string())
}

fn row_for(ctx: &SweepContext<'_>, variable: SweepVariable, base: &Point<'_>, value: &str) -> Result<SweepRow> {
    let parsed = match variable {
        SweepVariable::Microbatches => positive(value).and_then(small).map(|m| Point { m, ..*base }),
        SweepVariable::DpDegree => positive(value).and_then(small).map(|n_a| Point { n_a, ..*base }),
        SweepVariable::BatchSize => positive(value).and_then(|b| {
            let per = u64::from(base.m) * u64::from(base.n_a);
            if b % per == 0 {
                Ok(Point { b_a: b / per, ..*base })
            } else {
                Err(format!("not a multiple of m * n_a = {per}"))
            }
        }),
        SweepVariable::GpuPair => unreachable!("pair rows are planned separately"),
    };
    match parsed {
        Ok(p) => evaluate_point(ctx, &p, value),
        Err(note) => Ok(SweepRow::unevaluated(value, note)),
    }
}

fn evaluate_point(ctx: &SweepContext<'_>, p: &Point<'_>, value: &str) -> Result<SweepRow> {
    let model = ctx.model;
    let cm = ctx
        .costs
        .cost_model(model, ctx.workload, (p.gpu_a, p.tp_a), (p.gpu_e, p.tp_e))?;
    let b_a = p.b_a as f64;
    let b_e = b_a * f64::from(p.n_a) * f64::from(model.topk) / f64::from(model.experts) * ctx.limits.expert_imbalance;
    let shape = CommShape {
        b_a,
        b_e,
        tp_a: p.tp_a,
        tp_e: p.tp_e,
        w_a: p.gpu_a.net_bandwidth_per_gpu,
        w_e: p.gpu_e.net_bandwidth_per_gpu,
        attention_nodes: p.n_a,
    };
    let times = StageTimes::new(
        attention_time(b_a, &cm),
        expert_time(b_e, &cm),
        comm_time(&shape, model, &cm),
    )?;
    let sim = simulate(&times, p.m, model.layers)?;

    let tokens = f64::from(p.m) * f64::from(p.n_a) * b_a;
    let throughput = tokens / sim.total_latency;
    let gpus = f64::from(p.tp_a) * f64::from(p.n_a) + f64::from(p.tp_e) * f64::from(model.experts);
    let tpuc = match (
        p.gpu_a.unit_cost(ctx.limits.cost_metric),
        p.gpu_e.unit_cost(ctx.limits.cost_metric),
    ) {
        (Some(ca), Some(ce)) => {
            let cost = f64::from(p.tp_a) * f64::from(p.n_a) * ca + f64::from(p.tp_e) * f64::from(model.experts) * ce;
            Some(throughput / cost)
        }
        _ => None,
    };
    let iter_latency = sim.mean_iter_latency();

    let mut notes = Vec::new();
    if (times.t_a - times.t_e).abs() / times.t_f() > ctx.limits.balance_slack {
        notes.push("unbalanced".to_string());
    }
    let memory = kv_cache_check(p.m, p.b_a, model, ctx.workload, p.tp_a, p.gpu_a)?.with_expert(p.tp_e, p.gpu_e);
    if !memory.fits() {
        notes.push("memory exceeded".to_string());
    }
    match min_microbatches(times.t_c, times.t_f()) {
        Ok(min_m) if p.m < min_m => notes.push(format!("m below minimum {min_m}")),
        Ok(_) => {}
        Err(_) => notes.push("communication not hideable".to_string()),
    }
    if iter_latency > ctx.workload.slo_tbt {
        notes.push("exceeds SLO".to_string());
    }
    Ok(SweepRow {
        value: value.to_string(),
        evaluated: true,
        constraints_met: notes.is_empty(),
        t_a: Some(times.t_a),
        t_e: Some(times.t_e),
        t_c: Some(times.t_c),
        total_latency: Some(sim.total_latency),
        iter_latency: Some(iter_latency),
        throughput: Some(throughput),
        throughput_per_gpu: Some(throughput / gpus),
        normalized_throughput: None,
        tpuc,
        attention_idle: Some(sim.attention_idle_fraction),
        expert_idle: Some(sim.expert_idle_fraction),
        note: notes.join("; "),
    })
}

/// Plans the pair and reports its best plan at the simulated latency.
fn pair_row(ctx: &SweepContext<'_>, value: &str) -> Result<SweepRow> {
    let Some((a, e)) = value.split_once('/') else {
        return Ok(SweepRow::unevaluated(value, "expected ATTN/EXPERT"));
    };
    let (Some(gpu_a), Some(gpu_e)) = (ctx.catalog.get(a.trim()), ctx.catalog.get(e.trim())) else {
        return Ok(SweepRow::unevaluated(value, "unknown GPU"));
    };
    if gpu_a.unit_cost(ctx.limits.cost_metric).is_none() || gpu_e.unit_cost(ctx.limits.cost_metric).is_none() {
        return Ok(SweepRow::unevaluated(
            value,
            format!("no value for the {} metric", ctx.limits.cost_metric),
        ));
    }
    let outcome = search(ctx.model, gpu_a, gpu_e, ctx.costs, ctx.workload, ctx.limits)?;
    let Some(plan) = outcome.best else {
        let why = outcome
            .dominant_binding()
            .map_or_else(|| "no candidates".to_string(), |b| format!("no feasible plan ({b})"));
        return Ok(SweepRow::unevaluated(value, why));
    };
    let base = SweepBase::from_plan(&plan);
    let p = Point {
        gpu_a,
        gpu_e,
        tp_a: base.tp_a,
        tp_e: base.tp_e,
        n_a: base.n_a,
        m: base.m,
        b_a: base.b_a,
    };
    let mut row = evaluate_point(ctx, &p, value)?;
    let shape = format!("tp_a={} tp_e={} n_a={} m={} b_a={}", p.tp_a, p.tp_e, p.n_a, p.m, p.b_a);
    row.note = if row.note.is_empty() {
        shape
    } else {
        format!("{shape}; {}", row.note)
    };
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::builtin_catalog;
    use crate::catalog::builtin_model;
    use crate::perf_model::{CommBackend, CostModel};
    use crate::planner::balance_attention_nodes;

    fn spec(variable: SweepVariable, range: &[&str], fixed: SweepBase) -> SweepSpec {
        SweepSpec {
            variable,
            range: range.iter().map(|s| s.to_string()).collect(),
            fixed: Some(fixed),
        }
    }

    fn base() -> SweepBase {
        SweepBase {
            gpu_a: "H20".into(),
            gpu_e: "H20".into(),
            tp_a: 2,
            tp_e: 2,
            n_a: 2,
            m: 3,
            b_a: 64,
        }
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("1..4").unwrap(), ["1", "2", "3", "4"]);
        assert_eq!(parse_range("2..=3").unwrap(), ["2", "3"]);
        assert_eq!(parse_range(" 1, 2 ,x").unwrap(), ["1", "2", "x"]);
        assert!(parse_range("4..1").is_err());
        assert!(parse_range("").unwrap().is_empty());
        assert_eq!("dp-degree".parse::<SweepVariable>().unwrap(), SweepVariable::DpDegree);
        assert!("bogus".parse::<SweepVariable>().is_err());
    }

    #[test]
    fn empty_range_is_an_error_and_bad_values_are_rows() {
        let model = builtin_model("mixtral").unwrap();
        let catalog = builtin_catalog();
        let cm = CostModel::affine(1e-4, 1e-3, 1e-4, 1e-3).with_backend(CommBackend::ideal());
        let (w, l) = (WorkloadSpec::default(), SearchLimits::default());
        let ctx = SweepContext {
            model: &model,
            catalog: &catalog,
            costs: &cm,
            workload: &w,
            limits: &l,
        };
        assert!(run_sweep(&ctx, &spec(SweepVariable::Microbatches, &[], base())).is_err());

        let r = run_sweep(&ctx, &spec(SweepVariable::Microbatches, &["0", "x", "2", "3"], base())).unwrap();
        assert_eq!(
            r.rows.iter().map(|r| r.evaluated).collect::<Vec<_>>(),
            [false, false, true, true]
        );
        assert_eq!(r.rows[2].normalized_throughput, Some(1.0));

        let r = run_sweep(&ctx, &spec(SweepVariable::BatchSize, &["384", "385"], base())).unwrap();
        assert!(r.rows[0].evaluated && !r.rows[1].evaluated);
        assert_eq!(r.rows[0].t_a, Some(1e-4 * 64.0 + 1e-3));

        let r = run_sweep(&ctx, &spec(SweepVariable::GpuPair, &["H20", "H20/nope"], base())).unwrap();
        assert!(r.rows.iter().all(|r| !r.evaluated));
    }

    #[test]
    fn microbatch_rows_match_the_closed_form_when_hideable() {
        let model = builtin_model("mixtral").unwrap();
        let catalog = builtin_catalog();
        let cm = CostModel::affine(1e-4, 1e-3, 1e-4 * 4.0, 1e-3).with_backend(CommBackend::ideal());
        let (w, l) = (WorkloadSpec::default(), SearchLimits::default());
        let ctx = SweepContext {
            model: &model,
            catalog: &catalog,
            costs: &cm,
            workload: &w,
            limits: &l,
        };
        let r = run_sweep(&ctx, &spec(SweepVariable::Microbatches, &["3", "4", "5"], base())).unwrap();
        for row in &r.rows {
            let m: u32 = row.value.parse().unwrap();
            let t = StageTimes::new(row.t_a.unwrap(), row.t_e.unwrap(), row.t_c.unwrap()).unwrap();
            let closed = crate::pipeline::closed_form_total(&t, m, model.layers).unwrap();
            assert!((row.total_latency.unwrap() - closed).abs() <= 1e-9 * closed);
            let tokens = f64::from(m) * 2.0 * 64.0;
            assert_eq!(row.throughput.unwrap(), tokens / row.total_latency.unwrap());
        }
    }

    #[test]
    fn dp_sweep_per_gpu_peaks_at_balance_point() {
        let model = builtin_model("mixtral").unwrap();
        let catalog = builtin_catalog();
        let cm = CostModel::affine(4e-5, 2e-4, 1e-5, 2e-4).with_backend(CommBackend::ideal());
        let n_star = balance_attention_nodes(&cm, model.experts, model.topk);
        assert_eq!(n_star, 16);
        let (w, l) = (WorkloadSpec::default(), SearchLimits::default());
        let ctx = SweepContext {
            model: &model,
            catalog: &catalog,
            costs: &cm,
            workload: &w,
            limits: &l,
        };
        let range: Vec<String> = (1..=24).map(|v| v.to_string()).collect();
        let r = run_sweep(
            &ctx,
            &SweepSpec {
                variable: SweepVariable::DpDegree,
                range,
                fixed: Some(SweepBase { b_a: 128, ..base() }),
            },
        )
        .unwrap();
        let best = r
            .rows
            .iter()
            .max_by(|a, b| a.throughput_per_gpu.unwrap().total_cmp(&b.throughput_per_gpu.unwrap()))
            .unwrap();
        assert_eq!(best.value, n_star.to_string());
    }
}
