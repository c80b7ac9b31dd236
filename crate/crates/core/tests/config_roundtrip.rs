use moeplan::catalog::{
    builtin_catalog, Catalog, Config, CostMetric, GpuSpec, MoeModelSpec, SearchLimits, WorkloadSpec,
};
use moeplan::Error;
use proptest::prelude::*;

fn gpu() -> impl Strategy<Value = GpuSpec> {
    (
        "[A-Z][A-Z0-9]{1,6}",
        1e-3f64..1e3,
        1u64..1u64 << 40,
        1e9f64..1e13,
        1e12f64..1e16,
        1e8f64..1e12,
        proptest::option::of(10.0f64..2000.0),
        prop::sample::select(vec![1u32, 2, 4, 8]),
    )
        .prop_map(|(name, price, cap, bw, compute, net, power, per_node)| GpuSpec {
            name,
            price,
            mem_capacity: cap,
            mem_bandwidth: bw,
            compute,
            net_bandwidth_per_gpu: net,
            max_power: power,
            max_gpus_per_node: per_node,
        })
}

fn model() -> impl Strategy<Value = MoeModelSpec> {
    (1u32..200, 1u32..64, 1u32..64, 1u32..10, 1u32..5)
        .prop_flat_map(|(layers, hidden_units, experts, g, bpp)| {
            (
                Just((layers, hidden_units * 128, experts, g, bpp)),
                1..=experts,
                1u32..100_000,
            )
        })
        .prop_map(|((layers, hidden, experts, g, bpp), topk, inter)| MoeModelSpec {
            name: "random-moe".into(),
            layers,
            hidden,
            intermediate: inter,
            experts,
            topk,
            gqa_group: g,
            bytes_per_param: bpp,
            head_dim: None,
        })
}

fn config() -> impl Strategy<Value = Config> {
    (
        prop::collection::vec(gpu(), 1..6),
        model(),
        (1u32..100_000, 1e-4f64..10.0),
        (3u32..32, prop::bool::ANY, 0.0f64..1.0, 1.0f64..3.0),
    )
        .prop_filter_map("unique names", |(gpus, model, (seq, slo), (mm, power, slack, imb))| {
            let hardware = Catalog::new(gpus).ok()?;
            Some(Config {
                hardware,
                model,
                workload: WorkloadSpec {
                    avg_seq_len: seq,
                    slo_tbt: slo,
                    ..WorkloadSpec::default()
                },
                limits: SearchLimits {
                    max_microbatches: mm,
                    cost_metric: if power { CostMetric::Power } else { CostMetric::Price },
                    balance_slack: slack,
                    expert_imbalance: imb,
                },
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn json_round_trip_is_lossless(c in config()) {
        let back = Config::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn builtin_model_name_expands() {
    let c = Config::from_json(r#"{"model": "dbrx"}"#).unwrap();
    assert_eq!(c.model.experts, 16);
    assert_eq!(c.hardware, builtin_catalog());
    assert_eq!(c.workload, WorkloadSpec::default());
}

fn parse_err(text: &str) -> String {
    match Config::from_json(text) {
        Err(e @ Error::Parse { .. }) => e.to_string(),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn parse_errors_name_the_field() {
    let e = parse_err(r#"{"model": "mixtral", "workload": {"slo_tbt": "fast"}}"#);
    assert!(e.contains("workload.slo_tbt"), "{e}");
    let e = parse_err(r#"{"model": "mixtral", "limits": {"max_microbatch": 4}}"#);
    assert!(e.contains("limits"), "{e}");
    let e = parse_err("{\"model\": \"mixtral\",\n \"hardware\": [{\"name\": \"X\"}]}");
    assert!(e.contains("hardware"), "{e}");
    assert!(e.contains("line 2"), "{e}");
    parse_err("not json");
}

#[test]
fn invalid_values_are_rejected() {
    let cases = [
        (r#"{"model": "gpt-moe"}"#, "unknown"),
        (r#"{"model": "mixtral", "workload": {"slo_tbt": 0}}"#, "slo_tbt"),
        (
            r#"{"model": "mixtral", "limits": {"max_microbatches": 2}}"#,
            "max_microbatches",
        ),
        (
            r#"{"model": "mixtral", "limits": {"expert_imbalance": 0.5}}"#,
            "expert_imbalance",
        ),
        (r#"{"model": "mixtral", "hardware": []}"#, "empty"),
        (
            r#"{"model": {"name": "x", "layers": 2, "hidden": 64, "intermediate": 8, "experts": 4, "topk": 5, "gqa_group": 1}}"#,
            "topk",
        ),
        (
            r#"{"model": "mixtral", "hardware": [
                {"name": "A", "price": 1, "mem_capacity": 1, "mem_bandwidth": 1, "compute": 1, "net_bandwidth_per_gpu": 1},
                {"name": "a", "price": 1, "mem_capacity": 1, "mem_bandwidth": 1, "compute": 1, "net_bandwidth_per_gpu": 1}]}"#,
            "duplicate",
        ),
        (
            r#"{"model": "mixtral", "hardware": [
                {"name": "A", "price": -1, "mem_capacity": 1, "mem_bandwidth": 1, "compute": 1, "net_bandwidth_per_gpu": 1}]}"#,
            "price",
        ),
        (
            r#"{"model": "mixtral", "hardware": [
                {"name": "A", "price": 1, "mem_capacity": 1, "mem_bandwidth": 1, "compute": 1, "net_bandwidth_per_gpu": 1, "max_gpus_per_node": 3}]}"#,
            "max_gpus_per_node",
        ),
    ];
    for (text, needle) in cases {
        let e = Config::from_json(text).expect_err(text).to_string();
        assert!(e.contains(needle), "{text}: {e}");
    }
}

#[test]
fn shipped_configs_load() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["mixtral_default.json", "custom_cluster.json"] {
        let c = moeplan::catalog::load_config_file(format!("{dir}/{name}")).unwrap();
        c.model.validate().unwrap();
    }
}
