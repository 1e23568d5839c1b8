//! Simulator invariants over random scenarios.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use flowqueue::sim::{run_sim, verify, LengthDist, Mode, SegmentKind, SimScenario, StageSpec};

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop::sample::select(Mode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reports_satisfy_invariants(seed in any::<u64>(), mode in mode_strategy(), s in 0u64..3) {
        let sc = SimScenario { staleness: s, ..common::scenario(&mut common::rng(seed), mode) };
        let r = run_sim(&sc).unwrap();
        verify(&sc, &r).unwrap();
        prop_assert!(r.conservation.holds());
        prop_assert_eq!(r.step_end_ns.len() as u64, sc.iterations);
        prop_assert!(r.step_end_ns.windows(2).all(|w| w[0] <= w[1]));
        let bound = if mode.is_async() { s } else { 0 };
        prop_assert!(r.max_staleness <= bound);
        prop_assert!(r.versions_per_step.iter().all(|&v| v <= sc.lookahead() + 1));
        for v in r.bubble_ratio.values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        // Segments on one instance never overlap.
        let mut by_instance: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
        for seg in &r.gantt.segments {
            prop_assert!(seg.start_ns <= seg.end_ns && seg.end_ns <= r.gantt.end_ns);
            by_instance.entry(&seg.instance).or_default().push((seg.start_ns, seg.end_ns));
        }
        for (inst, mut spans) in by_instance {
            spans.sort();
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "{} overlaps: {:?}", inst, w);
            }
        }
    }

    #[test]
    fn same_seed_same_report(seed in any::<u64>(), mode in mode_strategy()) {
        let sc = common::scenario(&mut common::rng(seed), mode);
        prop_assert_eq!(run_sim(&sc).unwrap(), run_sim(&sc).unwrap());
    }

    #[test]
    fn staggered_swaps_respect_the_window(seed in any::<u64>(), k in 1usize..3) {
        let mut sc = common::scenario(&mut common::rng(seed), Mode::StreamedAsyncStaggered);
        sc.rollout_instances = sc.rollout_instances.max(k as u32 + 1);
        sc.stagger_k = k;
        let r = run_sim(&sc).unwrap();
        let mut edges: Vec<(u64, i32)> = Vec::new();
        for seg in r.gantt.segments.iter().filter(|s| s.kind == SegmentKind::H2d && s.instance.starts_with("rollout")) {
            edges.push((seg.start_ns, 1));
            edges.push((seg.end_ns, -1));
        }
        // Ends sort before starts at the same instant.
        edges.sort();
        let mut live = 0;
        for (_, d) in edges {
            live += d;
            prop_assert!(live <= k as i32);
        }
    }
}

#[test]
fn sequential_with_weight_sync_adds_one_transfer_between_steps() {
    let (g, l, tok, p, w, n) = (16u64, 128u64, 10_000u64, 1_000_000u64, 3_000_000u64, 4u64);
    let sc = SimScenario {
        mode: Mode::Sequential,
        global_batch: g,
        rollout_instances: 1,
        train_instances: 1,
        lengths: LengthDist::Fixed { tokens: l },
        per_token_ns: tok,
        per_sample_train_ns: p,
        weight_transfer_ns: w,
        h2d_ns: 400_000,
        iterations: n,
        ..SimScenario::desk(Mode::Sequential)
    };
    let r = run_sim(&sc).unwrap();
    // Generate then train each step; a blocking sync separates steps and
    // none follows the last. The load is part of the blocking sync.
    assert_eq!(r.end_to_end_time_ns, n * (g * l * tok + g * p) + (n - 1) * w);
}

#[test]
fn streamed_overlaps_generation_and_training() {
    let seq = run_sim(&SimScenario::desk(Mode::Sequential)).unwrap();
    let st = run_sim(&SimScenario::desk(Mode::Streamed)).unwrap();
    assert!(st.end_to_end_time_ns < seq.end_to_end_time_ns);
    assert_eq!(st.max_staleness, 0);
}

#[test]
fn inference_stage_sits_between_rollout_and_train() {
    let sc = SimScenario {
        stages: vec![StageSpec { name: "reference".into(), instances: 2, per_sample_ns: 500_000, micro_batch: 4 }],
        iterations: 5,
        ..SimScenario::desk(Mode::StreamedAsync)
    };
    let r = run_sim(&sc).unwrap();
    assert!(r.bubble_ratio.contains_key("reference"));
    let infer: u64 = r.gantt.segments.iter().filter(|s| s.kind == SegmentKind::Infer).count() as u64;
    // 64 samples per step in micro-batches of 4.
    assert_eq!(infer, 5 * 64 / 4);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut sc = SimScenario::desk(Mode::StreamedAsyncStaggered);
    sc.stagger_k = sc.rollout_instances as usize;
    assert!(run_sim(&sc).is_err());
    let sc = SimScenario { global_batch: 0, ..SimScenario::desk(Mode::Streamed) };
    assert!(run_sim(&sc).is_err());
}
