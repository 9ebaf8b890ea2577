mod common;

use common::*;
use ecg_tcn::parallel::Execution;
use ecg_tcn::tcn::Network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_finite_differences() {
    let arch = toy_arch();
    let net = Network::<f64>::build(&arch, 21).unwrap();
    let (xs, ys) = random_batch(&arch, 5, 8);
    let report = gradient_check(&net, &xs, &ys, 1e-5, 100);
    for r in &report {
        println!(
            "{:<24} n={:<4} max_rel_err={:.3e}",
            r.tensor, r.checked, r.max_rel_err
        );
    }
    for r in &report {
        assert!(
            r.max_rel_err <= 1e-4,
            "{} rel err {}",
            r.tensor,
            r.max_rel_err
        );
    }
}

#[test]
fn duplicating_batch_keeps_mean_gradient() {
    let mut arch = toy_arch();
    arch.dropout_p = 0.0;
    let net = Network::<f64>::build(&arch, 2).unwrap();
    let (xs, ys) = random_batch(&arch, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, g1, _) = net
        .loss_and_grad(&xs, &ys, &mut rng, Execution::Sequential)
        .unwrap();
    let xs2: Vec<_> = xs.iter().chain(&xs).cloned().collect();
    let ys2: Vec<_> = ys.iter().chain(&ys).cloned().collect();
    let (_, g2, _) = net
        .loss_and_grad(&xs2, &ys2, &mut rng, Execution::Sequential)
        .unwrap();
    let mut a = Vec::new();
    g1.visit(&mut |_, _, _, t| a.extend_from_slice(t));
    let mut b = Vec::new();
    g2.visit(&mut |_, _, _, t| b.extend_from_slice(t));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let arch = toy_arch();
    let net = Network::<f64>::build(&arch, 3).unwrap();
    let (xs, ys) = random_batch(&arch, 7, 1);
    let run = |exec| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, g, _) = net.loss_and_grad(&xs, &ys, &mut rng, exec).unwrap();
        let mut v = vec![l];
        g.visit(&mut |_, _, _, t| v.extend_from_slice(t));
        v.into_iter().map(f64::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
