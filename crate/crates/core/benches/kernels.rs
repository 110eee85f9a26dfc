//! Sequential against rayon-parallel kernels at toy-model sizes.
//!
//! `cargo bench -p offsite-core`; with `--no-default-features` only the
//! sequential rows run.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use offsite::tensor::kernels::{attention, matmul_with, AttnDims, Exec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn strategies() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // Batch 8 x 64 tokens through the d=128 MLP and the byte-vocabulary head.
    for (m, k, n) in [(512, 128, 512), (512, 512, 128), (512, 128, 256)] {
        let a = random(m * k, 1);
        let b = random(k * n, 2);
        for (name, exec) in strategies() {
            group.bench_with_input(BenchmarkId::new(name, format!("{m}x{k}x{n}")), &exec, |bench, &exec| {
                bench.iter(|| matmul_with(exec, &a, &b, m, k, n))
            });
        }
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let dims = AttnDims {
        batch: 8,
        seq: 64,
        heads: 4,
        d: 128,
    };
    let n = dims.batch * dims.seq * dims.d;
    let (q, k, v) = (random(n, 3), random(n, 4), random(n, 5));
    for (name, exec) in strategies() {
        group.bench_with_input(BenchmarkId::new(name, "8x64x128"), &exec, |bench, &exec| {
            bench.iter(|| attention(exec, &q, &k, &v, dims))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_attention);
criterion_main!(benches);
