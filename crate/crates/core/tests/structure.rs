mod common;

use ecg_tcn::engine::run_program;
use ecg_tcn::engine::QFeatureMap;
use ecg_tcn::parallel::Execution;
use ecg_tcn::quant::fold_batchnorm;
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::tcn::{receptive_field, train, ArchConfig, FeatureMap, Network, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every observed activation, flattened, keyed by edge name.
fn activations(net: &Network<f32>, x: &[f32]) -> Vec<(String, FeatureMap<f32>)> {
    let mut out = Vec::new();
    net.forward_observed(&FeatureMap::from_signal(x), &mut |n, m| {
        if n != "logits" {
            out.push((n.to_string(), m.clone()))
        }
    })
    .unwrap();
    out
}

/// Earliest and latest time step at which any channel of `a` and `b` differ.
fn changed_span(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> Option<(usize, usize)> {
    let mut span: Option<(usize, usize)> = None;
    for c in 0..a.channels {
        for (t, (x, y)) in a.row(c).iter().zip(b.row(c)).enumerate() {
            if x != y {
                span = Some(span.map_or((t, t), |(lo, hi)| (lo.min(t), hi.max(t))));
            }
        }
    }
    span
}

#[test]
fn receptive_field_covers_a_beat() {
    assert_eq!(receptive_field(11, 3), 141);
    assert!(ArchConfig::ecg5000().covers_input());
    assert_eq!(ArchConfig::ecg5000().dilations(), [1, 2, 4]);
}

#[test]
fn float_activations_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..4 {
        let net = common::full_float(seed);
        let x: Vec<f32> = (0..140).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = activations(&net, &x);
        for _ in 0..10 {
            let t0 = rng.gen_range(0..140);
            let mut y = x.clone();
            y[t0] += rng.gen_range(0.5..3.0);
            for ((name, a), (_, b)) in base.iter().zip(&activations(&net, &y)) {
                if let Some((lo, _)) = changed_span(a, b) {
                    assert!(lo >= t0, "{name}: step {lo} moved after perturbing {t0}");
                }
            }
        }
    }
}

#[test]
fn reach_is_bounded_by_receptive_field() {
    // Short window so the bound is not vacuous: RFS = 13 over 40 steps.
    let arch = ArchConfig {
        input_len: 40,
        ..common::toy_arch()
    };
    let rfs = arch.receptive_field();
    assert_eq!(rfs, 13);
    let last = format!("block{}.out", arch.levels - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut widest = 0;
    for seed in 0..8 {
        let net = Network::<f32>::build(&arch, seed).unwrap();
        let x: Vec<f32> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t0 = 5;
        let mut y = x.clone();
        y[t0] += 2.0;
        let a = activations(&net, &x);
        let b = activations(&net, &y);
        let pick =
            |v: &[(String, FeatureMap<f32>)]| v.iter().find(|(n, _)| *n == last).unwrap().1.clone();
        if let Some((lo, hi)) = changed_span(&pick(&a), &pick(&b)) {
            assert!(lo >= t0 && hi - t0 < rfs, "reach {}..={} from {t0}", lo, hi);
            widest = widest.max(hi - t0);
        }
    }
    // The bound is attained for generic weights.
    assert_eq!(widest, rfs - 1);
}

#[test]
fn quantized_activations_are_causal() {
    let q = common::full_qnet(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x: Vec<i8> = (0..140).map(|_| rng.gen()).collect();
        let t0 = rng.gen_range(0..140);
        let mut y = x.clone();
        y[t0] = y[t0].wrapping_add(rng.gen_range(1..=127));
        let input = |d: Vec<i8>| QFeatureMap::new(1, 140, d, q.input_qp).unwrap();
        let (a, _) = run_program(&q, &input(x)).unwrap();
        let (b, _) = run_program(&q, &input(y)).unwrap();
        for (ma, mb) in a.iter().zip(&b) {
            if ma.length != 140 {
                continue;
            }
            for c in 0..ma.channels {
                assert_eq!(ma.row(c)[..t0], mb.row(c)[..t0]);
            }
        }
    }
}

#[test]
fn folding_matches_on_beats() {
    let net = common::full_float(12);
    let folded = fold_batchnorm(&net);
    let ds = synthetic_dataset(100, &ECG5000_TRAIN_SHARES, 12);
    for b in &ds.beats {
        let x = FeatureMap::from_signal(&b.samples);
        let (a, f) = (net.forward(&x).unwrap(), folded.forward(&x).unwrap());
        let scale = a.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
        let err = a
            .iter()
            .zip(&f)
            .fold(0f32, |m, (p, q)| m.max((p - q).abs()));
        assert!(err / scale <= 1e-4);
    }
}

#[test]
fn ten_beats_can_be_memorized() {
    let ds = synthetic_dataset(10, &[0.2; 5], 4);
    let net = Network::<f32>::build(&ArchConfig::ecg5000(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        exec: Execution::Parallel,
        ..TrainConfig::default()
    };
    let out = train(net, &ds, &ds, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    let hit = losses.iter().position(|&l| l <= 0.05);
    assert!(
        hit.is_some(),
        "final training loss {}",
        losses.last().unwrap()
    );
    assert!(losses[losses.len() - 1] < losses[0]);
}
