use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ecg_tcn::engine::qpredict_dataset;
use ecg_tcn::parallel::Execution;
use ecg_tcn::quant::quantize_from_float;
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::tcn::{ArchConfig, FeatureMap, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn benches(c: &mut Criterion) {
    let ds = synthetic_dataset(64, &ECG5000_TRAIN_SHARES, 0);
    let xs: Vec<FeatureMap<f32>> = ds
        .beats
        .iter()
        .map(|b| FeatureMap::from_signal(&b.samples))
        .collect();
    let labels = ds.labels();
    let net = Network::<f32>::build(&ArchConfig::ecg5000(), 0).unwrap();
    let q = quantize_from_float(&net, &ds, Execution::Parallel).unwrap();

    let mut g = c.benchmark_group("forward_batch_64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| net.forward_batch(&xs, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("loss_and_grad_30");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| {
                net.loss_and_grad(&xs[..30], &labels[..30], &mut rng, exec)
                    .unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("qpredict_dataset_64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| qpredict_dataset(&q, &ds, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(name = group; config = Criterion::default().sample_size(20); targets = benches);
criterion_main!(group);
