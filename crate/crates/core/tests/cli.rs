use std::process::{Command, Output};

use moeplan::planner::DeploymentPlan;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moeplan"));
    c.env_remove("MOEPLAN_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn configs(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn plan_json_round_trips() {
    let o = run(&["plan", "--gpu", "H20", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plan: DeploymentPlan = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((plan.gpu_a.as_str(), plan.gpu_e.as_str()), ("H20", "H20"));
    assert_eq!(plan.batch % (u64::from(plan.m) * u64::from(plan.n_a)), 0);
    assert!(plan.t_iter_upper <= 0.15);
}

#[test]
fn plan_csv_has_header_and_one_row() {
    let o = run(&["--csv", "plan", "--gpu", "H800"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    assert_eq!(headers.len(), 17);
    assert_eq!(&headers[0], "gpu_a");
    assert_eq!(r.records().count(), 1);
}

#[test]
fn infeasible_exits_two() {
    let o = run(&["plan", "--gpu", "H20", "--slo", "1e-6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no feasible plan"), "{}", stderr(&o));
}

#[test]
fn input_errors_exit_one_without_panicking() {
    let cases: &[&[&str]] = &[
        &[],
        &["plan"],
        &["plan", "--gpu", "TPU"],
        &["plan", "--gpu", "H20", "--model", "nope"],
        &["plan", "--gpu", "H20", "--slo", "-1"],
        &["plan", "--gpu", "H20", "--config", "/does/not/exist.json"],
        &["--json", "--csv", "plan", "--gpu", "H20"],
        &["sweep", "--gpu", "H20", "--variable", "m", "--range", ""],
        &["sweep", "--gpu", "H20", "--variable", "colour", "--range", "1..3"],
        &["sweep", "--gpu", "H20", "--variable", "m", "--range", "5..1"],
        &["simulate", "--ta", "1", "--te", "1", "--tc", "0", "--m", "0"],
        &["simulate", "--ta", "nan", "--te", "1", "--tc", "0", "--m", "3"],
        &[
            "simulate", "--ta", "1", "--te", "1", "--tc", "0", "--m", "100000", "--layers", "1000",
        ],
        &["calibrate", "--profile", "/does/not/exist.csv"],
        &["balance", "--nodes", "4"],
        &["balance", "--trace", "/does/not/exist.csv", "--nodes", "4"],
        &["balance", "--trace", "x", "--nodes", "0"],
    ];
    for args in cases {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).contains("panicked"), "{args:?}");
    }
}

#[test]
fn malformed_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = dir.path().join("bad.json");
    std::fs::write(
        &bad_json,
        "{\"model\": \"mixtral\", \"workload\": {\"slo_tbt\": \"x\"}}",
    )
    .unwrap();
    let o = run(&["plan", "--gpu", "H20", "--config", bad_json.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("workload.slo_tbt"), "{}", stderr(&o));

    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "layer,expert,load\n0,0,abc\n").unwrap();
    let o = run(&["balance", "--trace", bad_csv.to_str().unwrap(), "--nodes", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).contains("panicked"));

    let o = run(&["calibrate", "--profile", bad_csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_comes_from_environment() {
    let o = bin()
        .env("MOEPLAN_CONFIG", configs("custom_cluster.json"))
        .args(["--json", "plan", "--gpu", "H20"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plan: DeploymentPlan = serde_json::from_str(&stdout(&o)).unwrap();
    // the custom workload tightens the SLO to 100 ms
    assert!(plan.t_iter_upper <= 0.1);
    let text = stdout(
        &bin()
            .env("MOEPLAN_CONFIG", configs("custom_cluster.json"))
            .args(["plan", "--gpu", "H20"])
            .output()
            .unwrap(),
    );
    assert!(text.starts_with("small-moe"), "{text}");

    let o = bin()
        .env("MOEPLAN_CONFIG", "/does/not/exist.json")
        .args(["plan", "--gpu", "H20"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn explicit_config_flag_wins_over_environment() {
    let o = bin()
        .env("MOEPLAN_CONFIG", "/does/not/exist.json")
        .args(["--config", &configs("mixtral_default.json"), "plan", "--gpu", "H20"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn sweep_csv_columns() {
    let o = run(&["--csv", "sweep", "--gpu", "H20", "--variable", "m", "--range", "1..=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    for col in [
        "value",
        "evaluated",
        "constraints_met",
        "t_a",
        "t_e",
        "t_c",
        "throughput",
        "normalized_throughput",
        "note",
    ] {
        assert!(headers.iter().any(|h| h == col), "missing {col}");
    }
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(&rows[0][0], "1");
    assert_eq!(&rows[0][1], "true");
    assert_eq!(&rows[0][2], "false");
}

#[test]
fn sweep_gpu_pairs() {
    let o = run(&[
        "--json",
        "sweep",
        "--variable",
        "gpu_pair",
        "--range",
        "H20/L40S,L40S/H20,H20/TPU",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["evaluated"], false);
    assert_eq!(rows[2]["note"], "unknown GPU");
}

#[test]
fn balance_fractional_reaches_average() {
    let o = run(&[
        "--json",
        "balance",
        "--trace",
        &configs("expert_loads.csv"),
        "--nodes",
        "3",
        "--mode",
        "fractional",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let (c_max, avg) = (v["c_max"].as_f64().unwrap(), v["average"].as_f64().unwrap());
    assert!((c_max - avg).abs() <= 1e-12 * avg, "{c_max} vs {avg}");

    let o = run(&[
        "--csv",
        "balance",
        "--trace",
        &configs("expert_loads.csv"),
        "--nodes",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("node,cost,experts\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn calibrate_recovers_profile_slopes() {
    let o = run(&["--json", "calibrate", "--profile", &configs("profile_h20_l40s.csv")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let k1 = v["cost_model"]["k1"].as_f64().unwrap();
    let k3 = v["cost_model"]["k3"].as_f64().unwrap();
    assert!((k1 - 6.5e-7).abs() / 6.5e-7 < 0.05, "{k1}");
    assert!((k3 - 6.4e-7).abs() / 6.4e-7 < 0.05, "{k3}");
}

#[test]
fn plan_with_profile_is_feasible() {
    let o = run(&[
        "plan",
        "--gpu-a",
        "H20",
        "--gpu-e",
        "L40S",
        "--profile",
        &configs("profile_h20_l40s.csv"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn simulate_matches_closed_form() {
    let o = run(&[
        "--json", "simulate", "--ta", "1", "--te", "1", "--tc", "0.4", "--m", "3", "--layers", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sim = v["simulation"]["total_latency"].as_f64().unwrap();
    let closed = v["closed_form_total"].as_f64().unwrap();
    assert!((sim - 7.8).abs() < 1e-12 && (closed - 7.8).abs() < 1e-12);
}

#[test]
fn simulate_writes_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let o = run(&[
        "simulate",
        "--ta",
        "1",
        "--te",
        "2",
        "--tc",
        "0.5",
        "--m",
        "4",
        "--timeline",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(path).unwrap();
    // header plus attention, two transfers and expert per micro-batch
    assert!(text.lines().count() > 4 * 4);
}

#[test]
fn hetero_ranks_pairs() {
    let o = run(&["--json", "plan", "--hetero", "--metric", "power"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(!v["ranked"].as_array().unwrap().is_empty());
}

#[test]
fn help_exits_zero() {
    for args in [&["--help"][..], &["plan", "--help"], &["--version"]] {
        assert_eq!(run(args).status.code(), Some(0));
    }
}
