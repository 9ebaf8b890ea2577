mod common;

use ecg_tcn::engine::{
    causal_pad, qconv1d_dilated, qpredict, qpredict_dataset, qrelu, qresidual_add, zero_stuff,
    QFeatureMap,
};
use ecg_tcn::parallel::Execution;
use ecg_tcn::quant::{fold_batchnorm, QConv, QuantParams, Requant};
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::tcn::FeatureMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qp(scale: f32, zero_point: i32) -> QuantParams {
    QuantParams { scale, zero_point }
}

/// Exact rational rounding with i128: floor(acc * mult / 2^shift + 1/2).
fn oracle_requant(acc: i128, r: Requant, zp: i32) -> i8 {
    let den = 1i128 << r.shift;
    let num = 2 * acc * r.mult as i128 + den;
    (num.div_euclid(2 * den) + zp as i128).clamp(-128, 127) as i8
}

/// Direct reading of the definition: no padding buffer, explicit time lookups.
fn oracle_conv(x: &QFeatureMap, l: &QConv) -> Vec<i8> {
    let t_len = x.length;
    let mut out = vec![0i8; l.out_ch * t_len];
    for o in 0..l.out_ch {
        for t in 0..t_len {
            let mut acc = l.bias[o] as i128;
            for i in 0..l.in_ch {
                for k in 0..l.kernel {
                    let back = (l.kernel - 1 - k) * l.dilation;
                    let xv = if t >= back {
                        x.data[i * t_len + t - back] as i128
                    } else {
                        x.qp.zero_point as i128
                    };
                    acc += l.weight[(o * l.in_ch + i) * l.kernel + k] as i128
                        * (xv - x.qp.zero_point as i128);
                }
            }
            let mut q = oracle_requant(acc, l.requant, l.out_qp.zero_point);
            if l.relu {
                q = q.max(l.out_qp.zero_point as i8);
            }
            out[o * t_len + t] = q;
        }
    }
    out
}

fn random_layer(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    dilation: usize,
) -> QConv {
    QConv {
        in_ch,
        out_ch,
        kernel,
        dilation,
        weight: (0..in_ch * out_ch * kernel).map(|_| rng.gen()).collect(),
        bias: (0..out_ch).map(|_| rng.gen_range(-5000..5000)).collect(),
        weight_scale: 0.01,
        requant: Requant::from_ratio(rng.gen_range(1e-4..0.05)).unwrap(),
        out_qp: qp(0.1, rng.gen_range(-128..=127)),
        relu: rng.gen(),
    }
}

fn random_map(rng: &mut ChaCha8Rng, channels: usize, length: usize) -> QFeatureMap {
    let data = (0..channels * length).map(|_| rng.gen()).collect();
    QFeatureMap::new(channels, length, data, qp(0.05, rng.gen_range(-128..=127))).unwrap()
}

#[test]
fn small_conv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..200 {
        let d = 1 + trial % 3;
        let layer = random_layer(&mut rng, 2, 2, 3, d);
        let x = random_map(&mut rng, 2, 8);
        assert_eq!(
            qconv1d_dilated(&x, &layer).unwrap().data,
            oracle_conv(&x, &layer),
            "trial {trial}"
        );
    }
}

#[test]
fn one_hot_current_tap_is_identity() {
    let mut w = vec![0i8; 3 * 3 * 5];
    for c in 0..3 {
        w[(c * 3 + c) * 5 + 4] = 1;
    }
    let layer = QConv {
        in_ch: 3,
        out_ch: 3,
        kernel: 5,
        dilation: 2,
        weight: w,
        bias: vec![0; 3],
        weight_scale: 1.0,
        requant: Requant::from_ratio(1.0).unwrap(),
        out_qp: qp(1.0, 0),
        relu: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = random_map(&mut rng, 3, 20);
    x.qp = qp(1.0, 0);
    assert_eq!(qconv1d_dilated(&x, &layer).unwrap().data, x.data);
}

#[test]
fn dilation_four_reach() {
    let q = common::full_qnet(2);
    let layer = &q.blocks[2].conv1;
    assert_eq!(layer.dilation, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_map(&mut rng, 11, 140);
    let base = qconv1d_dilated(&x, layer).unwrap();
    let t0 = 70;
    for c in 0..11 {
        let mut y = x.clone();
        y.data[c * 140 + t0] = y.data[c * 140 + t0].wrapping_add(100);
        let out = qconv1d_dilated(&y, layer).unwrap();
        for o in 0..11 {
            for t in 0..140 {
                if out.data[o * 140 + t] != base.data[o * 140 + t] {
                    assert!(
                        t >= t0 && (t - t0) % 4 == 0 && t - t0 <= 40,
                        "output {t} moved by input {t0}"
                    );
                }
            }
        }
    }
}

#[test]
fn pad_region_dequantizes_to_zero() {
    let x = QFeatureMap::new(1, 2, vec![3, 4], qp(0.2, -37)).unwrap();
    let p = causal_pad(&x, 5);
    for &v in &p.data[..5] {
        assert!(p.qp.dequantize(v).abs() <= p.qp.scale / 2.0);
    }
}

#[test]
fn residual_add_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let a = random_map(&mut rng, 3, 30);
        let out_qp = qp(rng.gen_range(0.02..0.2), rng.gen_range(-20..20));
        let b = QFeatureMap::filled(3, 30, qp(0.07, rng.gen_range(-128..=127)));
        let ra = Requant::from_ratio(a.qp.scale as f64 / out_qp.scale as f64).unwrap();
        let rb = Requant::from_ratio(b.qp.scale as f64 / out_qp.scale as f64).unwrap();
        let y = qresidual_add(&a, &b, ra, rb, out_qp).unwrap();
        for (&av, &yv) in a.data.iter().zip(&y.data) {
            let real = a.qp.dequantize(av);
            let want = (real / out_qp.scale).round() as i64 + out_qp.zero_point as i64;
            assert!((yv as i64 - want.clamp(-128, 127)).abs() <= 1);
        }
        // a + a with both branches at half ratio is a again.
        let half = Requant::from_ratio(0.5).unwrap();
        let y = qresidual_add(&a, &a, half, half, a.qp).unwrap();
        for (&av, &yv) in a.data.iter().zip(&y.data) {
            assert!((av as i32 - yv as i32).abs() <= 1);
        }
        let za = QFeatureMap::filled(3, 30, a.qp);
        let zb = QFeatureMap::filled(3, 30, b.qp);
        let y = qresidual_add(&za, &zb, ra, rb, out_qp).unwrap();
        assert!(y.data.iter().all(|&v| v as i32 == out_qp.zero_point));
    }
    let a = QFeatureMap::filled(2, 3, qp(1.0, 0));
    let b = QFeatureMap::filled(3, 2, qp(1.0, 0));
    let r = Requant::from_ratio(1.0).unwrap();
    assert!(qresidual_add(&a, &b, r, r, qp(1.0, 0)).is_err());
}

#[test]
fn relu_output_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = random_map(&mut rng, 2, 50);
        let y = qrelu(&x);
        assert!(y.dequantize().iter().all(|&v| v >= -x.qp.scale / 2.0));
    }
}

#[test]
fn qpredict_is_deterministic_and_checks_length() {
    let q = common::full_qnet(7);
    let ds = synthetic_dataset(30, &ECG5000_TRAIN_SHARES, 7);
    let a = qpredict(&q, &ds.beats[0].samples).unwrap();
    assert_eq!(a, qpredict(&q, &ds.beats[0].samples).unwrap());
    assert!((1..=5).contains(&a.0));
    assert!(qpredict(&q, &ds.beats[0].samples[..139]).is_err());
    assert_eq!(
        qpredict_dataset(&q, &ds, Execution::Parallel).unwrap(),
        qpredict_dataset(&q, &ds, Execution::Sequential).unwrap()
    );
}

#[test]
fn dequantized_logits_track_float() {
    let float = common::full_float(9);
    let folded = fold_batchnorm(&float);
    let calib = synthetic_dataset(200, &ECG5000_TRAIN_SHARES, 9);
    let q = ecg_tcn::quant::quantize_from_float(&float, &calib, Execution::Parallel).unwrap();
    let test = synthetic_dataset(200, &ECG5000_TRAIN_SHARES, 10);
    let s = q.logit_scale();
    let mut err = 0.0;
    let mut n = 0;
    for b in &test.beats {
        let f = folded
            .forward(&FeatureMap::from_signal(&b.samples))
            .unwrap();
        let (_, l) = qpredict(&q, &b.samples).unwrap();
        for (fv, lv) in f.iter().zip(&l) {
            err += (*fv as f64 - *lv as f64 * s).abs();
            n += 1;
        }
    }
    let mean = err / n as f64;
    let bound = 5.0 * q.head.logit_qp.scale as f64;
    assert!(
        mean <= bound,
        "mean |logit error| {mean} > 5 output scales {bound}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_stuffing_is_bit_exact(seed in any::<u64>(), k in 1usize..6, d in 1usize..6, cin in 1usize..4, len in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, cin, 2, k, d);
        let z = zero_stuff(&layer);
        prop_assert_eq!(z.kernel, d * (k - 1) + 1);
        let x = random_map(&mut rng, cin, len);
        prop_assert_eq!(qconv1d_dilated(&x, &layer).unwrap(), qconv1d_dilated(&x, &z).unwrap());
    }

    #[test]
    fn conv_matches_oracle(seed in any::<u64>(), k in 1usize..5, d in 1usize..4, len in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, 3, 2, k, d);
        let x = random_map(&mut rng, 3, len);
        prop_assert_eq!(qconv1d_dilated(&x, &layer).unwrap().data, oracle_conv(&x, &layer));
    }
}
