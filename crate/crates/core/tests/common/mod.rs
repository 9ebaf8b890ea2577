#![allow(dead_code)]

use ecg_tcn::parallel::Execution;
use ecg_tcn::tcn::{ArchConfig, FeatureMap, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every tensor kind appears: entry conv, dilated convs, BN, dropout,
/// a 1x1 skip conv with BN, identity skips and the dense head.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        input_len: 16,
        entry_filters: 2,
        block_filters: 3,
        block_kernel: 3,
        levels: 2,
        n_classes: 4,
        dropout_p: 0.25,
        ..ArchConfig::ecg5000()
    }
}

pub fn random_batch(arch: &ArchConfig, n: usize, seed: u64) -> (Vec<FeatureMap<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n)
        .map(|_| {
            let d: Vec<f64> = (0..arch.input_len)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            FeatureMap::new(1, arch.input_len, d).unwrap()
        })
        .collect();
    let ys = (0..n).map(|i| i % arch.n_classes + 1).collect();
    (xs, ys)
}

/// Training-mode mean cross-entropy with the dropout stream pinned to `seed`.
pub fn batch_loss(net: &Network<f64>, xs: &[FeatureMap<f64>], ys: &[usize], seed: u64) -> f64 {
    batch_loss_and_pattern(net, xs, ys, seed).0
}

/// [`batch_loss`] plus the sign pattern of every ReLU input.
pub fn batch_loss_and_pattern(
    net: &Network<f64>,
    xs: &[FeatureMap<f64>],
    ys: &[usize],
    seed: u64,
) -> (f64, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, _, tape) = net
        .loss_and_grad(xs, ys, &mut rng, Execution::Sequential)
        .unwrap();
    (loss, tape.relu_pattern())
}

pub struct GradCheck {
    pub tensor: String,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences on up to `per_tensor` coordinates of every
/// trainable tensor, compared with the analytic gradient.
///
/// A difference quotient is only a valid oracle when no ReLU switches between
/// `-h` and `+h`; when one does, the step is halved (down to `h / 1000`) so the
/// largest kink-free step is used and cancellation error stays small.
/// Coordinates still straddling a kink there are counted in `kinks`, not checked.
pub fn gradient_check(
    net: &Network<f64>,
    xs: &[FeatureMap<f64>],
    ys: &[usize],
    h: f64,
    per_tensor: usize,
) -> Vec<GradCheck> {
    let seed = 77;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads, tape) = net
        .loss_and_grad(xs, ys, &mut rng, Execution::Sequential)
        .unwrap();
    let base = tape.relu_pattern();

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |name, role, _, t| {
        if role.trainable() {
            analytic.push((name.to_string(), t.to_vec()));
        }
    });

    let mut pick = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            rand::seq::index::sample(&mut pick, g.len(), per_tensor).into_vec()
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut kinks = 0;
        for &c in &coords {
            let eval = |delta: f64| {
                let mut p = net.clone();
                let mut k = 0;
                p.visit_mut(&mut |_, role, t| {
                    if role.trainable() {
                        if k == ti {
                            t[c] += delta;
                        }
                        k += 1;
                    }
                });
                batch_loss_and_pattern(&p, xs, ys, seed)
            };
            let mut step = h;
            let fd = loop {
                let ((up, pu), (down, pd)) = (eval(step), eval(-step));
                if pu == base && pd == base {
                    break Some((up - down) / (2.0 * step));
                }
                if step <= h / 1000.0 {
                    break None;
                }
                step /= 2.0;
            };
            match fd {
                Some(fd) => {
                    checked += 1;
                    worst = worst.max(rel_err(g[c], fd));
                }
                None => kinks += 1,
            }
        }
        out.push(GradCheck {
            tensor: name.clone(),
            checked,
            kinks,
            max_rel_err: worst,
        });
    }
    out
}

/// Gives every batch norm non-trivial statistics and affine terms so that
/// folding actually changes the weights.
pub fn randomize_bn(net: &mut Network<f32>, seed: u64) {
    use ecg_tcn::tcn::TensorRole;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.visit_mut(&mut |_, role, t| {
        for v in t.iter_mut() {
            match role {
                TensorRole::Gamma => *v = rng.gen_range(0.5..1.5),
                TensorRole::Beta | TensorRole::RunningMean => *v = rng.gen_range(-0.3..0.3),
                TensorRole::RunningVar => *v = rng.gen_range(0.3..2.0),
                _ => {}
            }
        }
    });
}

/// Full-size float network with randomized batch-norm state.
pub fn full_float(seed: u64) -> Network<f32> {
    let mut net = Network::<f32>::build(&ArchConfig::ecg5000(), seed).unwrap();
    randomize_bn(&mut net, seed ^ 0xb4);
    net
}

/// Full-size quantized network calibrated on surrogate beats.
pub fn full_qnet(seed: u64) -> ecg_tcn::quant::QNetwork {
    let calib =
        ecg_tcn::synthetic::synthetic_dataset(64, &ecg_tcn::synthetic::ECG5000_TRAIN_SHARES, seed);
    ecg_tcn::quant::quantize_from_float(&full_float(seed), &calib, Execution::default()).unwrap()
}

/// Entry 1x1 identity conv straight into a dense head, no residual blocks.
/// With `input_len == n_classes` and an identity head, logits equal inputs.
pub fn identity_qnet(input_len: usize, n_classes: usize) -> ecg_tcn::quant::QNetwork {
    use ecg_tcn::quant::{QConv, QDense, QNetwork, QuantParams, Requant};
    let unit = QuantParams {
        scale: 1.0,
        zero_point: 0,
    };
    let mut head = vec![0i8; n_classes * input_len];
    for i in 0..n_classes.min(input_len) {
        head[i * input_len + i] = 1;
    }
    QNetwork {
        arch: ArchConfig {
            input_len,
            entry_filters: 1,
            levels: 0,
            n_classes,
            ..ArchConfig::ecg5000()
        },
        input_qp: unit,
        entry: QConv {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            dilation: 1,
            weight: vec![1],
            bias: vec![0],
            weight_scale: 1.0,
            requant: Requant::from_ratio(1.0).unwrap(),
            out_qp: unit,
            relu: false,
        },
        blocks: vec![],
        head: QDense {
            in_features: input_len,
            out_features: n_classes,
            weight: head,
            bias: vec![0; n_classes],
            weight_scale: 1.0,
            logit_qp: unit,
        },
    }
}
