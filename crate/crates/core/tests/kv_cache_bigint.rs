use moeplan::catalog::{GpuSpec, MoeModelSpec, WorkloadSpec};
use moeplan::perf_model::kv_cache_check;
use num_bigint::BigUint;
use proptest::prelude::*;

fn big(v: u64) -> BigUint {
    BigUint::from(v)
}

#[allow(clippy::too_many_arguments)]
/// `4 m b_a s h L / g + P_a < tp_a C_a` for bf16 in exact rationals:
/// multiply through by `g`.
fn reference_fits(m: u64, b_a: u64, s: u64, h: u64, l: u64, g: u64, tp_a: u64, cap: u64) -> bool {
    let kv = big(4) * big(m) * big(b_a) * big(s) * big(h) * big(l);
    let pa = big(l) * big(h) * big(h) * (big(2) * big(g) + big(2)) * big(2);
    kv + pa < big(tp_a) * big(cap) * big(g)
}

fn model(h: u32, l: u32, g: u32) -> MoeModelSpec {
    MoeModelSpec {
        name: "random".into(),
        layers: l,
        hidden: h,
        intermediate: h * 2,
        experts: 8,
        topk: 2,
        gqa_group: g,
        bytes_per_param: 2,
        head_dim: None,
    }
}

fn gpu(cap: u64) -> GpuSpec {
    GpuSpec {
        name: "g".into(),
        price: 1.0,
        mem_capacity: cap,
        mem_bandwidth: 1e12,
        compute: 1e14,
        net_bandwidth_per_gpu: 1e10,
        max_power: None,
        max_gpus_per_node: 8,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_arbitrary_precision(
        m in 1u32..16,
        b_a in 0u64..1_000_000,
        s in 1u32..200_000,
        h in 64u32..32_768,
        l in 1u32..160,
        g in 1u32..16,
        tp_a in 1u32..9,
        cap in 1u64..2_000_000_000_000,
    ) {
        let w = WorkloadSpec { avg_seq_len: s, ..WorkloadSpec::default() };
        let r = kv_cache_check(m, b_a, &model(h, l, g), &w, tp_a, &gpu(cap)).unwrap();
        let want = reference_fits(m.into(), b_a, s.into(), h.into(), l.into(), g.into(), tp_a.into(), cap);
        prop_assert_eq!(r.attention_fits, want);
    }

    #[test]
    fn boundary_is_exact(h in 64u32..8192, l in 1u32..100, g in 1u32..9, s in 1u32..4096) {
        // capacity placed exactly at, and one byte above, the requirement for b_a = 1
        let (hh, ll, gg, ss) = (u64::from(h), u64::from(l), u64::from(g), u64::from(s));
        let need_scaled = 4 * ss * hh * ll + ll * hh * hh * (2 * gg + 2) * 2;
        let w = WorkloadSpec { avg_seq_len: s, ..WorkloadSpec::default() };
        if need_scaled % gg == 0 {
            let cap = need_scaled / gg;
            prop_assert!(!kv_cache_check(1, 1, &model(h, l, g), &w, 1, &gpu(cap)).unwrap().attention_fits);
            prop_assert!(kv_cache_check(1, 1, &model(h, l, g), &w, 1, &gpu(cap + 1)).unwrap().attention_fits);
        }
        let cap = need_scaled.div_ceil(gg);
        let want = reference_fits(1, 1, ss, hh, ll, gg, 1, cap);
        prop_assert_eq!(kv_cache_check(1, 1, &model(h, l, g), &w, 1, &gpu(cap)).unwrap().attention_fits, want);
    }
}
