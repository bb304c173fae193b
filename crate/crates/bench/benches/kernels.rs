use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fourstream::fusion::fuse_level1;
use fourstream::training::{adam_update, AdamConfig};
use fourstream::FusionStrategy;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_fuse_level1(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embeddings: Vec<Array1<f64>> =
        (0..3).map(|_| Array1::from_iter((0..768).map(|_| rng.gen::<f64>() - 0.5))).collect();
    let mut group = c.benchmark_group("fuse_level1");
    for strategy in FusionStrategy::ALL {
        group.bench_with_input(
            BenchmarkId::from_parameter(strategy.as_str()),
            &strategy,
            |b, &s| b.iter(|| fuse_level1(&embeddings, s).unwrap()),
        );
    }
    group.finish();
}

fn bench_adam_update(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1 << 16;
    let mut value: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let grad: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let cfg = AdamConfig::default();
    let mut t = 0u64;
    c.bench_function("adam_update_64k", |b| {
        b.iter(|| {
            t += 1;
            adam_update(&mut value, &grad, &mut m, &mut v, t, &cfg);
        })
    });
}

criterion_group!(benches, bench_fuse_level1, bench_adam_update);
criterion_main!(benches);
