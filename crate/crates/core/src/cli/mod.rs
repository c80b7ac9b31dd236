//! Command-line front end.
//!
//! Exit codes: 0 success, 1 input error, 2 no feasible plan. Every command
//! writes a human table by default, JSON with `--json` and CSV with `--csv`.

mod table;

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::balance::{balance_experts_with, load_trace, BalanceMode, BalanceOptions, PlacementReport};
use crate::catalog::{builtin_model, load_config_file, Config, CostMetric, GpuSpec};
use crate::error::{Error, Result};
use crate::perf_model::{load_profile, AffineFit, CommBackend, CostModel, CostSource, RooflineOracle};
use crate::pipeline::{
    closed_form_iter_bounds, closed_form_total, min_microbatches, simulate, simulate_with_jitter_config, JitterConfig,
    JitterReport, SimSummary, StageTimes,
};
use crate::planner::{hetero_search, search, DeploymentPlan, HeteroOutcome, SearchOutcome};
use crate::sweep::{parse_range, run_sweep, SweepBase, SweepContext, SweepReport, SweepSpec, SweepVariable};

pub use table::Table;
use table::{num, opt, secs};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "MOEPLAN_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "moeplan", version, about = "Capacity planner for disaggregated MoE decoding")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file (hardware, model, workload, limits).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Emit JSON.
    #[arg(long, global = true, conflicts_with = "csv")]
    pub json: bool,
    /// Emit CSV.
    #[arg(long, global = true)]
    pub csv: bool,
    /// Seed for stochastic commands.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Also print every evaluated candidate and why it was rejected.
    #[arg(long, global = true)]
    pub explain: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for the deployment with the best throughput per unit cost.
    Plan(PlanArgs),
    /// Vary one parameter around a plan.
    Sweep(SweepArgs),
    /// Run the ping-pong pipeline for given stage times.
    Simulate(SimulateArgs),
    /// Fit the cost model to a measured profile.
    Calibrate(CalibrateArgs),
    /// Place experts on nodes from a load trace.
    Balance(BalanceArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SetupArgs {
    /// Builtin model name (mixtral, dbrx, scaled-moe); overrides the config's model.
    #[arg(long)]
    pub model: Option<String>,
    /// GPU for both roles.
    #[arg(long)]
    pub gpu: Option<String>,
    /// GPU of the attention nodes.
    #[arg(long)]
    pub gpu_a: Option<String>,
    /// GPU of the expert nodes.
    #[arg(long)]
    pub gpu_e: Option<String>,
    /// Cost metric: price or power.
    #[arg(long)]
    pub metric: Option<CostMetric>,
    /// Time-between-tokens SLO, seconds.
    #[arg(long)]
    pub slo: Option<f64>,
    /// Average context length, tokens.
    #[arg(long)]
    pub seq_len: Option<u32>,
    #[arg(long)]
    pub max_microbatches: Option<u32>,
    /// Measured profile CSV; without it costs come from the roofline model.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Communication backend: ideal, optimized or legacy.
    #[arg(long, default_value = "optimized")]
    pub backend: String,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// Search every ordered GPU pair of the catalog.
    #[arg(long)]
    pub hetero: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// microbatches, dp_degree, batch_size or gpu_pair.
    #[arg(long)]
    pub variable: SweepVariable,
    /// Values: `1,2,4`, `1..4` (inclusive) or `H20/L40S,L40S/H20`.
    #[arg(long)]
    pub range: String,
    #[arg(long)]
    pub tp_a: Option<u32>,
    #[arg(long)]
    pub tp_e: Option<u32>,
    #[arg(long)]
    pub n_a: Option<u32>,
    #[arg(long)]
    pub m: Option<u32>,
    /// Attention micro-batch size, tokens.
    #[arg(long)]
    pub b_a: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Attention time per micro-batch and layer, seconds.
    #[arg(long)]
    pub ta: f64,
    /// Expert time, seconds.
    #[arg(long)]
    pub te: f64,
    /// One-way communication time, seconds.
    #[arg(long)]
    pub tc: f64,
    #[arg(long)]
    pub m: u32,
    #[arg(long, default_value_t = 1)]
    pub layers: u32,
    /// Add message overhead and jitter of this backend (ideal, optimized, legacy).
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub trials: usize,
    /// Message fan-out for the backend's per-receiver penalty.
    #[arg(long, default_value_t = 8)]
    pub receivers: u32,
    /// Write the timeline CSV to this file.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// CSV with `kind,batch,seconds` rows (kind attention or expert) and
    /// optional `util,message_bytes,utilization` rows.
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, default_value = "optimized")]
    pub backend: String,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// CSV with `layer,expert_id,token_count`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub nodes: usize,
    /// integral, fractional, replicated or replicated:R.
    #[arg(long, default_value = "integral")]
    pub mode: BalanceMode,
    /// Cost of keeping an expert resident even when idle.
    #[arg(long, default_value_t = 0.0)]
    pub k_cold: f64,
    /// Maximum experts (or replicas) per node.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Rebalance cadence in decoding steps; echoed in the report.
    #[arg(long)]
    pub rebalance_interval: Option<u32>,
    /// Balance one layer instead of the sum over layers.
    #[arg(long)]
    pub layer: Option<u32>,
}

/// What a successful command found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    Infeasible,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Output goes to `out`, diagnostics to `err`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(&cli, out, err) {
        Ok(Status::Done) => EXIT_OK,
        Ok(Status::Infeasible) => EXIT_INFEASIBLE,
        // Downstream closed the pipe (`| head`); nothing left to report.
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_INPUT
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let g = &cli.global;
    match &cli.command {
        Command::Plan(a) => cmd_plan(g, a, out, err),
        Command::Sweep(a) => cmd_sweep(g, a, out, err),
        Command::Simulate(a) => cmd_simulate(g, a, out),
        Command::Calibrate(a) => cmd_calibrate(g, a, out),
        Command::Balance(a) => cmd_balance(g, a, out),
    }
}

fn stdout_err(e: io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    emit(out, &text)?;
    emit(out, "\n")
}

fn csv_text(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

/// Config from `--config` (or the environment), else the builtin catalog and
/// defaults; command-line overrides applied and validated.
pub fn resolve_config(path: Option<&Path>, setup: &SetupArgs) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => load_config_file(p)?,
        None => Config::for_builtin(setup.model.as_deref().unwrap_or("mixtral"))?,
    };
    if let (Some(name), Some(_)) = (&setup.model, path) {
        let same = name.eq_ignore_ascii_case(&cfg.model.name);
        if !same {
            cfg.model = builtin_model(name)?;
        }
    }
    if let Some(metric) = setup.metric {
        cfg.limits.cost_metric = metric;
    }
    if let Some(slo) = setup.slo {
        cfg.workload.slo_tbt = slo;
    }
    if let Some(s) = setup.seq_len {
        cfg.workload.avg_seq_len = s;
    }
    if let Some(n) = setup.max_microbatches {
        cfg.limits.max_microbatches = n;
    }
    cfg.model.validate()?;
    cfg.workload.validate()?;
    cfg.limits.validate()?;
    Ok(cfg)
}

fn cost_source(setup: &SetupArgs) -> Result<Box<dyn CostSource>> {
    let backend = CommBackend::by_name(&setup.backend)?;
    Ok(match &setup.profile {
        Some(p) => Box::new(load_profile(p)?.cost_model(backend)?.0),
        None => Box::new(RooflineOracle {
            comm_backend: backend,
            ..RooflineOracle::default()
        }),
    })
}

fn gpu_pair<'c>(cfg: &'c Config, setup: &SetupArgs) -> Result<(&'c GpuSpec, &'c GpuSpec)> {
    let a = setup.gpu_a.as_ref().or(setup.gpu.as_ref());
    let e = setup.gpu_e.as_ref().or(setup.gpu.as_ref());
    match (a, e) {
        (Some(a), Some(e)) => Ok((cfg.hardware.lookup(a)?, cfg.hardware.lookup(e)?)),
        _ => Err(Error::invalid("gpu", "give --gpu, or both --gpu-a and --gpu-e")),
    }
}

fn plan_table(plan: &DeploymentPlan) -> String {
    let mut t = Table::new(["field", "value"]);
    let rows: Vec<(&str, String)> = vec![
        ("attention GPU", plan.gpu_a.clone()),
        ("expert GPU", plan.gpu_e.clone()),
        ("tp_a", plan.tp_a.to_string()),
        ("tp_e", plan.tp_e.to_string()),
        ("attention nodes n_a", plan.n_a.to_string()),
        ("expert nodes", plan.experts.to_string()),
        ("micro-batches m", plan.m.to_string()),
        ("global batch", plan.batch.to_string()),
        ("b_a", num(plan.b_a)),
        ("b_e", num(plan.b_e)),
        ("T_a", secs(plan.t_a)),
        ("T_e", secs(plan.t_e)),
        ("T_c", secs(plan.t_c)),
        ("T_iter upper bound", secs(plan.t_iter_upper)),
        ("T_total", secs(plan.t_total)),
        ("T_total simulated", secs(plan.t_total_simulated)),
        ("throughput (tok/s)", num(plan.throughput)),
        ("total GPUs", plan.total_gpus.to_string()),
        ("cost", format!("{} ({})", num(plan.cost), plan.cost_metric)),
        ("tpuc", num(plan.tpuc)),
        ("batch limited by", plan.batch_limit.to_string()),
    ];
    for (k, v) in rows {
        t.row([k.to_string(), v]);
    }
    let s = &plan.slack;
    let mut slack = Table::new(["constraint", "slack"]);
    slack.row(["balance".to_string(), num(s.balance)]);
    slack.row(["communication".to_string(), secs(s.communication)]);
    slack.row(["micro-batches".to_string(), s.microbatches.to_string()]);
    slack.row(["KV cache (bytes)".to_string(), num(s.kv_cache_bytes)]);
    slack.row(["expert memory (bytes)".to_string(), num(s.expert_memory_bytes)]);
    slack.row(["SLO".to_string(), secs(s.slo)]);
    format!("{t}\n{slack}")
}

const PLAN_CSV_HEADER: [&str; 17] = [
    "gpu_a",
    "gpu_e",
    "tp_a",
    "tp_e",
    "n_a",
    "m",
    "batch",
    "t_a",
    "t_e",
    "t_c",
    "t_iter_upper",
    "t_total",
    "throughput",
    "total_gpus",
    "cost",
    "tpuc",
    "batch_limit",
];

fn plan_record(p: &DeploymentPlan) -> Vec<String> {
    vec![
        p.gpu_a.clone(),
        p.gpu_e.clone(),
        p.tp_a.to_string(),
        p.tp_e.to_string(),
        p.n_a.to_string(),
        p.m.to_string(),
        p.batch.to_string(),
        p.t_a.to_string(),
        p.t_e.to_string(),
        p.t_c.to_string(),
        p.t_iter_upper.to_string(),
        p.t_total.to_string(),
        p.throughput.to_string(),
        p.total_gpus.to_string(),
        p.cost.to_string(),
        p.tpuc.to_string(),
        p.batch_limit.to_string(),
    ]
}

fn csv_records(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    csv_text(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        let err = |e: csv::Error| Error::Parse {
            context: "csv output".into(),
            message: e.to_string(),
        };
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        w.flush().map_err(stdout_err)
    })
}

fn explain_text(outcome: &SearchOutcome) -> Result<String> {
    let mut t = Table::new([
        "tp_a",
        "tp_e",
        "n_a",
        "m",
        "batch",
        "T_a",
        "T_e",
        "T_c",
        "GPUs",
        "tpuc",
        "rejected by",
    ]);
    let o = |v: Option<f64>| v.map_or_else(|| "-".into(), secs);
    for c in &outcome.candidates {
        t.row([
            c.tp_a.to_string(),
            c.tp_e.to_string(),
            c.n_a.map_or_else(|| "-".into(), |v| v.to_string()),
            c.m.to_string(),
            c.batch.map_or_else(|| "-".into(), |v| v.to_string()),
            o(c.t_a),
            o(c.t_e),
            o(c.t_c),
            c.total_gpus.map_or_else(|| "-".into(), |v| v.to_string()),
            opt(c.tpuc),
            c.binding.map_or_else(String::new, |b| b.to_string()),
        ]);
    }
    let mut s = format!("\ncandidates ({} batch searches)\n{t}", outcome.evaluations);
    for (b, n) in outcome.binding_counts() {
        s.push_str(&format!("rejected by {b}: {n}\n"));
    }
    Ok(s)
}

fn infeasible_message(err: &mut dyn Write, what: &str, binding: Option<String>) {
    let reason = binding.unwrap_or_else(|| "no candidates".into());
    let _ = writeln!(err, "no feasible plan for {what}; binding constraint: {reason}");
}

fn cmd_plan(g: &GlobalArgs, a: &PlanArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let cfg = resolve_config(g.config.as_deref(), &a.setup)?;
    let costs = cost_source(&a.setup)?;
    if a.hetero {
        let outcome = hetero_search(&cfg.model, &cfg.hardware, costs.as_ref(), &cfg.workload, &cfg.limits)?;
        write_hetero(g, &cfg, &outcome, out)?;
        if outcome.ranked.is_empty() {
            infeasible_message(err, &format!("{} on any GPU pair", cfg.model.name), None);
            return Ok(Status::Infeasible);
        }
        return Ok(Status::Done);
    }
    let (gpu_a, gpu_e) = gpu_pair(&cfg, &a.setup)?;
    let outcome = search(&cfg.model, gpu_a, gpu_e, costs.as_ref(), &cfg.workload, &cfg.limits)?;
    if g.json {
        if g.explain {
            emit_json(out, &outcome)?;
        } else if let Some(plan) = &outcome.best {
            emit_json(out, plan)?;
        }
    } else if g.csv {
        if g.explain {
            emit(out, &csv_text(|buf| outcome.write_explain_csv(buf))?)?;
        } else if let Some(plan) = &outcome.best {
            emit(out, &csv_records(&PLAN_CSV_HEADER, [plan_record(plan)])?)?;
        }
    } else {
        if let Some(plan) = &outcome.best {
            emit(
                out,
                &format!(
                    "{} with attention on {} and experts on {}\n\n{}",
                    cfg.model.name,
                    plan.gpu_a,
                    plan.gpu_e,
                    plan_table(plan)
                ),
            )?;
        }
        if g.explain {
            emit(out, &explain_text(&outcome)?)?;
        }
    }
    match outcome.best {
        Some(_) => Ok(Status::Done),
        None => {
            let what = format!("{} on {}/{}", cfg.model.name, gpu_a.name, gpu_e.name);
            infeasible_message(err, &what, outcome.dominant_binding().map(|b| b.to_string()));
            Ok(Status::Infeasible)
        }
    }
}

fn write_hetero(g: &GlobalArgs, cfg: &Config, outcome: &HeteroOutcome, out: &mut dyn Write) -> Result<()> {
    if g.json {
        return emit_json(out, outcome);
    }
    if g.csv {
        let mut header = vec!["rank"];
        header.extend(PLAN_CSV_HEADER);
        let rows = outcome.ranked.iter().enumerate().filter_map(|(i, r)| {
            r.plan.as_ref().map(|p| {
                let mut rec = vec![(i + 1).to_string()];
                rec.extend(plan_record(p));
                rec
            })
        });
        return emit(out, &csv_records(&header, rows)?);
    }
    let mut t = Table::new([
        "rank",
        "attention",
        "experts",
        "tp_a",
        "tp_e",
        "n_a",
        "m",
        "batch",
        "GPUs",
        "throughput",
        "tpuc",
    ]);
    for (i, r) in outcome.ranked.iter().enumerate() {
        if let Some(p) = &r.plan {
            t.row([
                (i + 1).to_string(),
                p.gpu_a.clone(),
                p.gpu_e.clone(),
                p.tp_a.to_string(),
                p.tp_e.to_string(),
                p.n_a.to_string(),
                p.m.to_string(),
                p.batch.to_string(),
                p.total_gpus.to_string(),
                num(p.throughput),
                num(p.tpuc),
            ]);
        }
    }
    let mut s = format!(
        "{}: GPU pairs ranked by throughput per unit {}\n\n{t}",
        cfg.model.name, cfg.limits.cost_metric
    );
    if !outcome.infeasible.is_empty() {
        s.push_str("\nno feasible plan:\n");
        for r in &outcome.infeasible {
            let why = r.binding.map_or_else(|| "no candidates".into(), |b| b.to_string());
            s.push_str(&format!("  {}/{}: {why}\n", r.gpu_a, r.gpu_e));
        }
    }
    if !outcome.excluded.is_empty() {
        s.push_str("\nexcluded:\n");
        for x in &outcome.excluded {
            s.push_str(&format!("  {}/{}: {}\n", x.gpu_a, x.gpu_e, x.reason));
        }
    }
    emit(out, &s)
}

fn cmd_sweep(g: &GlobalArgs, a: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let range = parse_range(&a.range)?;
    if range.is_empty() {
        return Err(Error::invalid("sweep range", "must contain at least one value"));
    }
    let cfg = resolve_config(g.config.as_deref(), &a.setup)?;
    let costs = cost_source(&a.setup)?;

    let fixed = match a.variable {
        SweepVariable::GpuPair => None,
        _ => {
            let (gpu_a, gpu_e) = gpu_pair(&cfg, &a.setup)?;
            let explicit = [a.tp_a, a.tp_e, a.n_a, a.m].iter().all(Option::is_some) && a.b_a.is_some();
            let mut base = if explicit {
                SweepBase {
                    gpu_a: gpu_a.name.clone(),
                    gpu_e: gpu_e.name.clone(),
                    tp_a: 0,
                    tp_e: 0,
                    n_a: 0,
                    m: 0,
                    b_a: 0,
                }
            } else {
                let outcome = search(&cfg.model, gpu_a, gpu_e, costs.as_ref(), &cfg.workload, &cfg.limits)?;
                match &outcome.best {
                    Some(plan) => SweepBase::from_plan(plan),
                    None => {
                        let what = format!("{} on {}/{} to sweep around", cfg.model.name, gpu_a.name, gpu_e.name);
                        infeasible_message(err, &what, outcome.dominant_binding().map(|b| b.to_string()));
                        let _ = writeln!(err, "give --tp-a, --tp-e, --n-a, --m and --b-a to sweep anyway");
                        return Ok(Status::Infeasible);
                    }
                }
            };
            base.tp_a = a.tp_a.unwrap_or(base.tp_a);
            base.tp_e = a.tp_e.unwrap_or(base.tp_e);
            base.n_a = a.n_a.unwrap_or(base.n_a);
            base.m = a.m.unwrap_or(base.m);
            base.b_a = a.b_a.unwrap_or(base.b_a);
            Some(base)
        }
    };
    let spec = SweepSpec {
        variable: a.variable,
        range,
        fixed,
    };
    let ctx = SweepContext {
        model: &cfg.model,
        catalog: &cfg.hardware,
        costs: costs.as_ref(),
        workload: &cfg.workload,
        limits: &cfg.limits,
    };
    let report = run_sweep(&ctx, &spec)?;
    write_sweep(g, &cfg, &report, out)?;
    Ok(Status::Done)
}

fn write_sweep(g: &GlobalArgs, cfg: &Config, report: &SweepReport, out: &mut dyn Write) -> Result<()> {
    if g.json {
        return emit_json(out, report);
    }
    if g.csv {
        return emit(out, &csv_text(|buf| report.write_csv(buf))?);
    }
    let mut t = Table::new([
        report.variable.to_string().as_str(),
        "T_a",
        "T_e",
        "T_c",
        "T_total",
        "T_iter",
        "tok/s",
        "tok/s/GPU",
        "norm",
        "tpuc",
        "attn idle",
        "expert idle",
        "note",
    ]);
    let o = |v: Option<f64>| v.map_or_else(|| "-".into(), secs);
    for r in &report.rows {
        t.row([
            r.value.clone(),
            o(r.t_a),
            o(r.t_e),
            o(r.t_c),
            o(r.total_latency),
            o(r.iter_latency),
            opt(r.throughput),
            opt(r.throughput_per_gpu),
            opt(r.normalized_throughput),
            opt(r.tpuc),
            opt(r.attention_idle),
            opt(r.expert_idle),
            r.note.clone(),
        ]);
    }
    let head = match &report.fixed {
        None => format!("{}: sweep over GPU pairs, each at its best plan\n\n", cfg.model.name),
        Some(f) => format!(
            "{}: sweep over {} around {}/{} tp_a={} tp_e={} n_a={} m={} b_a={}\n\n",
            cfg.model.name, report.variable, f.gpu_a, f.gpu_e, f.tp_a, f.tp_e, f.n_a, f.m, f.b_a
        ),
    };
    emit(out, &format!("{head}{t}"))
}

/// Output of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub times: StageTimes,
    pub microbatches: u32,
    pub layers: u32,
    pub closed_form_total: f64,
    pub iter_lower_bound: f64,
    pub iter_upper_bound: f64,
    /// `None` when communication cannot be hidden.
    pub min_microbatches: Option<u32>,
    pub simulation: SimSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jitter: Option<JitterReport>,
}

fn cmd_simulate(g: &GlobalArgs, a: &SimulateArgs, out: &mut dyn Write) -> Result<Status> {
    let times = StageTimes::new(a.ta, a.te, a.tc)?;
    let total = closed_form_total(&times, a.m, a.layers)?;
    let (lo, hi) = closed_form_iter_bounds(&times, a.m, a.layers)?;
    let steps = u64::from(a.m) * u64::from(a.layers);
    if steps > 10_000_000 {
        return Err(Error::invalid(
            "m * layers",
            format!("{steps} steps is too many to simulate"),
        ));
    }
    let sim = simulate(&times, a.m, a.layers)?;
    let jitter = match &a.backend {
        Some(name) => {
            let backend = CommBackend::by_name(name)?;
            let cfg = JitterConfig {
                trials: a.trials,
                receivers: a.receivers,
            };
            Some(simulate_with_jitter_config(
                &times, a.m, a.layers, &backend, g.seed, &cfg,
            )?)
        }
        None => None,
    };
    if let Some(path) = &a.timeline {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        sim.write_timeline_csv(io::BufWriter::new(file))?;
    }
    let report = SimulateReport {
        times,
        microbatches: a.m,
        layers: a.layers,
        closed_form_total: total,
        iter_lower_bound: lo,
        iter_upper_bound: hi,
        min_microbatches: min_microbatches(times.t_c, times.t_f()).ok(),
        simulation: sim.summary(a.m, a.layers),
        jitter,
    };
    if g.json {
        emit_json(out, &report)?;
    } else if g.csv {
        emit(out, &csv_text(|buf| sim.write_timeline_csv(buf))?)?;
    } else {
        let mut t = Table::new(["quantity", "value"]);
        t.row(["T_total (closed form)".to_string(), secs(report.closed_form_total)]);
        t.row(["T_total (simulated)".to_string(), secs(report.simulation.total_latency)]);
        t.row(["T_iter lower bound".to_string(), secs(lo)]);
        t.row(["T_iter upper bound".to_string(), secs(hi)]);
        t.row([
            "T_iter mean (simulated)".to_string(),
            secs(report.simulation.mean_iter_latency),
        ]);
        t.row([
            "T_iter max (simulated)".to_string(),
            secs(report.simulation.max_iter_latency),
        ]);
        t.row([
            "attention idle".to_string(),
            num(report.simulation.attention_idle_fraction),
        ]);
        t.row(["expert idle".to_string(), num(report.simulation.expert_idle_fraction)]);
        t.row([
            "minimum micro-batches".to_string(),
            report
                .min_microbatches
                .map_or_else(|| "none (T_c >= T_f)".into(), |v| v.to_string()),
        ]);
        if let Some(j) = &report.jitter {
            t.row([
                format!("p50 T_total ({}, {} trials)", j.backend, j.trials),
                secs(j.p50_total),
            ]);
            t.row([format!("p99 T_total ({})", j.backend), secs(j.p99_total)]);
        }
        emit(
            out,
            &format!(
                "T_a = {}, T_e = {}, T_c = {}, m = {}, L = {}\n\n{t}",
                secs(a.ta),
                secs(a.te),
                secs(a.tc),
                a.m,
                a.layers
            ),
        )?;
    }
    Ok(Status::Done)
}

/// Output of `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateReport {
    pub cost_model: CostModel,
    pub attention_fit: AffineFit,
    pub expert_fit: AffineFit,
}

fn cmd_calibrate(g: &GlobalArgs, a: &CalibrateArgs, out: &mut dyn Write) -> Result<Status> {
    let backend = CommBackend::by_name(&a.backend)?;
    let (cost_model, attention_fit, expert_fit) = load_profile(&a.profile)?.cost_model(backend)?;
    let report = CalibrateReport {
        cost_model,
        attention_fit,
        expert_fit,
    };
    if g.json {
        emit_json(out, &report)?;
    } else if g.csv {
        let rows = [&report.attention_fit, &report.expert_fit].map(|f| {
            vec![
                f.kind.to_string(),
                f.slope.to_string(),
                f.intercept.to_string(),
                f.rms_residual.to_string(),
                f.points.to_string(),
            ]
        });
        emit(
            out,
            &csv_records(&["kind", "slope", "intercept", "rms_residual", "points"], rows)?,
        )?;
    } else {
        let mut t = Table::new(["fit", "slope (s/token)", "intercept (s)", "rms residual (s)", "points"]);
        for (name, f) in [
            ("attention k1, k2", &report.attention_fit),
            ("expert k3, k4", &report.expert_fit),
        ] {
            t.row([
                name.to_string(),
                num(f.slope),
                num(f.intercept),
                num(f.rms_residual),
                f.points.to_string(),
            ]);
        }
        emit(out, &t.to_string())?;
    }
    Ok(Status::Done)
}

fn cmd_balance(g: &GlobalArgs, a: &BalanceArgs, out: &mut dyn Write) -> Result<Status> {
    let trace = load_trace(&a.trace)?;
    let loads = match a.layer {
        Some(l) => trace
            .layer(l)
            .ok_or_else(|| Error::invalid("layer", format!("layer {l} is not in the trace")))?
            .to_vec(),
        None => trace.total(),
    };
    let opts = BalanceOptions {
        mode: a.mode,
        max_experts_per_node: a.cap,
    };
    let placement = balance_experts_with(&loads, a.nodes, a.k_cold, &opts)?;
    let mut report = PlacementReport::new(placement, &loads, a.k_cold);
    report.rebalance_interval = a.rebalance_interval;
    let hosted = report.placement.replicas();
    let node_experts = |j: usize| -> String {
        hosted
            .iter()
            .enumerate()
            .filter(|(_, nodes)| nodes.contains(&j))
            .map(|(i, _)| {
                let x = report.placement.x[i][j];
                if (x - 1.0).abs() <= 1e-12 {
                    i.to_string()
                } else {
                    format!("{i}:{x:.4}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    if g.json {
        emit_json(out, &report)?;
    } else if g.csv {
        let rows = (0..report.nodes).map(|j| vec![j.to_string(), report.node_cost[j].to_string(), node_experts(j)]);
        emit(out, &csv_records(&["node", "cost", "experts"], rows)?)?;
    } else {
        let mut t = Table::new(["node", "cost", "experts (id or id:fraction)"]);
        for j in 0..report.nodes {
            t.row([j.to_string(), num(report.node_cost[j]), node_experts(j)]);
        }
        let mut s = format!(
            "{} experts on {} nodes, mode {}, K_cold = {}\n\n{t}\nC_max = {}\naverage = {}\nimbalance = {}\n",
            loads.len(),
            report.nodes,
            report.mode,
            num(a.k_cold),
            num(report.c_max),
            num(report.average),
            num(report.imbalance)
        );
        if let Some(r) = report.rebalance_interval {
            s.push_str(&format!("rebalance every {r} steps\n"));
        }
        emit(out, &s)?;
    }
    Ok(Status::Done)
}
