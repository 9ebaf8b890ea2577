mod common;

use ecg_tcn::cost::{
    arena_layout, count_macs, count_params, count_params_quantized, liveness, memory_footprint,
    peak_activation_bytes, weight_bytes, MacMode,
};
use ecg_tcn::engine::{qpredict, zero_stuff_network};
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::tcn::{ArchConfig, Conv1d, Network};
use ecg_tcn::tiling::{execute_tiled, plan_tiles, LayerKind};
use ecg_tcn::Error;
use proptest::prelude::*;

#[test]
fn single_conv_params_closed_form() {
    let c = Conv1d::<f32>::zeros(2, 11, 11, 1);
    assert_eq!(c.param_count(), 2 * 11 * 11 + 11);
}

#[test]
fn default_accounting() {
    let net = Network::<f32>::build(&ArchConfig::ecg5000(), 0).unwrap();
    let params = count_params(&net);
    assert!((params as f64 / 14_883.0 - 1.0).abs() <= 0.05, "{params}");
    // Closed form: Cout * T * Cin * K per conv, in * out for the head.
    let t = 140;
    let native = 2 * t + 11 * t * 2 * 11 + 11 * t * 2 + 5 * (11 * t * 11 * 11) + 1540 * 5;
    assert_eq!(count_macs(&net, MacMode::Native), native);
    let k_eff = |d: usize| d * 10 + 1;
    let stuffed = 2 * t
        + 11 * t * 2 * 11
        + 11 * t * 2
        + 11 * t * 11 * 11
        + 2 * 11 * t * 11 * k_eff(2)
        + 2 * 11 * t * 11 * k_eff(4)
        + 1540 * 5;
    assert_eq!(count_macs(&net, MacMode::ZeroStuffed), stuffed);
    assert_eq!(11 * t * 2 * 11, 33_880);
    let ratio = stuffed as f64 / native as f64;
    assert!((2.1..=2.4).contains(&ratio), "{ratio}");
}

#[test]
fn quantized_counts_agree_with_float() {
    let float = common::full_float(1);
    let q = common::full_qnet(1);
    let bn_params = float.bn_count() * 2 * 11;
    assert_eq!(count_params_quantized(&q), count_params(&float) - bn_params);
    assert_eq!(
        ecg_tcn::cost::count_params_with_bn(&q),
        count_params(&float)
    );
    assert_eq!(
        ecg_tcn::cost::count_macs_quantized(&q, MacMode::Native),
        count_macs(&float, MacMode::Native)
    );
    let z = zero_stuff_network(&q);
    assert_eq!(
        ecg_tcn::cost::count_macs_quantized(&z, MacMode::Native),
        count_macs(&float, MacMode::ZeroStuffed)
    );
}

#[test]
fn identity_network_peak_is_in_plus_out() {
    let q = common::identity_qnet(140, 5);
    assert_eq!(peak_activation_bytes(&q), 2 * 140);
}

#[test]
fn default_memory_fits() {
    let q = common::full_qnet(2);
    let (w, a) = memory_footprint(&q);
    assert!(w + a <= 40 * 1024, "{w} + {a}");
    // int8 lower bound: one byte per non-BN parameter.
    assert!(w >= count_params_quantized(&q));
    // Hand liveness: the first block's add holds conv2, skip and output.
    assert_eq!(a, 33 * 140);
}

#[test]
fn arena_never_overlaps_live_buffers() {
    for q in [
        common::full_qnet(3),
        zero_stuff_network(&common::full_qnet(3)),
        common::identity_qnet(140, 5),
    ] {
        let arena = arena_layout(&q);
        let edges = q.edges();
        let span = liveness(&q);
        assert_eq!(arena.size, peak_activation_bytes(&q));
        for a in 0..edges.len() {
            for b in a + 1..edges.len() {
                let (Some(oa), Some(ob)) = (arena.offsets[a], arena.offsets[b]) else {
                    continue;
                };
                let live_together = span[a].0 <= span[b].1 && span[b].0 <= span[a].1;
                let overlap = oa < ob + edges[b].bytes() && ob < oa + edges[a].bytes();
                assert!(
                    !(live_together && overlap),
                    "{} and {}",
                    edges[a].name,
                    edges[b].name
                );
                assert!(oa + edges[a].bytes() <= arena.size);
            }
        }
    }
}

#[test]
fn generous_budget_gives_single_tiles() {
    let q = common::full_qnet(4);
    let plan = plan_tiles(&q, 1 << 30, true).unwrap();
    assert!(plan.layers.iter().all(|l| l.tiles.len() == 1));
}

#[test]
fn default_budgets_are_feasible() {
    let q = common::full_qnet(4);
    for budget in [80 * 1024, 8 * 1024] {
        for db in [true, false] {
            let plan = plan_tiles(&q, budget, db).unwrap();
            assert!(plan.peak_working_set <= budget);
            plan.check_coverage(140).unwrap();
        }
    }
}

#[test]
fn tiny_budget_names_the_layer() {
    let q = common::full_qnet(4);
    match plan_tiles(&q, 600, true) {
        Err(Error::Capacity(msg)) => assert!(msg.contains("block"), "{msg}"),
        other => panic!("expected capacity error, got {other:?}"),
    }
}

#[test]
fn tile_ranges_have_halos() {
    let q = common::full_qnet(4);
    let plan = plan_tiles(&q, 8 * 1024, true).unwrap();
    let b2 = plan
        .layers
        .iter()
        .find(|l| l.name == "block2.conv2")
        .unwrap();
    assert_eq!(b2.kind, LayerKind::Conv);
    assert!(b2.tiles.len() > 1);
    for t in &b2.tiles {
        assert_eq!(t.input.0, t.out.0 as isize - 40);
        assert_eq!(t.input.1, t.out.1);
    }
}

#[test]
fn budget_sweep_respects_budget_and_halving_costs_transfers() {
    let q = common::full_qnet(5);
    let mut budget = 1 << 20;
    let mut prev: Option<usize> = None;
    while let Ok(plan) = plan_tiles(&q, budget, true) {
        assert!(plan.peak_working_set <= budget);
        plan.check_coverage(140).unwrap();
        if let Some(p) = prev {
            assert!(
                plan.bytes_l2_to_l1 >= p,
                "budget {budget}: {} < {p}",
                plan.bytes_l2_to_l1
            );
        }
        prev = Some(plan.bytes_l2_to_l1);
        budget /= 2;
    }
    assert!(budget < 8 * 1024);
}

#[test]
fn tiled_execution_matches_engine() {
    let q = common::full_qnet(6);
    let beats = synthetic_dataset(25, &ECG5000_TRAIN_SHARES, 6);
    for budget in [6 * 1024, 8 * 1024, 16 * 1024, 1 << 20] {
        let plan = plan_tiles(&q, budget, true).unwrap();
        for b in &beats.beats {
            assert_eq!(
                execute_tiled(&q, &b.samples, &plan).unwrap(),
                qpredict(&q, &b.samples).unwrap().1
            );
        }
    }
}

#[test]
fn plan_for_another_network_is_rejected() {
    let q = common::full_qnet(6);
    let other = common::identity_qnet(140, 5);
    let plan = plan_tiles(&other, 1 << 20, true).unwrap();
    let beat = vec![0.0; 140];
    assert!(matches!(
        execute_tiled(&q, &beat, &plan),
        Err(Error::Structure(_))
    ));
}

#[test]
fn plan_serializations() {
    let q = common::full_qnet(6);
    let plan = plan_tiles(&q, 8 * 1024, true).unwrap();
    let kv = plan.to_kv();
    assert!(kv.starts_with("budget=8192\ndouble_buffer=1\n"));
    let tiles = kv.lines().filter(|l| l.starts_with("tile ")).count();
    assert_eq!(
        tiles,
        plan.layers.iter().map(|l| l.tiles.len()).sum::<usize>()
    );
    assert!(plan.to_text().contains("block2.conv2"));
    assert_eq!(weight_bytes(&q), memory_footprint(&q).0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_feasible_plan_is_exact(budget in 3_000usize..40_000, db in any::<bool>(), seed in 0u64..1000) {
        let q = common::full_qnet(7);
        let beat = &synthetic_dataset(1, &ECG5000_TRAIN_SHARES, seed).beats[0];
        if let Ok(plan) = plan_tiles(&q, budget, db) {
            prop_assert!(plan.peak_working_set <= budget);
            prop_assert_eq!(execute_tiled(&q, &beat.samples, &plan).unwrap(), qpredict(&q, &beat.samples).unwrap().1);
        }
    }
}
