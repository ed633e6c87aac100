//! Rayon-backed evaluation vs the forced-sequential path.
//!
//! `forward_chunked` fans row chunks out over the rayon pool;
//! `forward_chunked_seq` is the same computation on one thread. The two are
//! bitwise identical in output, so this suite measures speedup only.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use invlab_core::data::{generate, FactorSpec, SplitSizes};
use invlab_core::eval::{forward_chunked, forward_chunked_seq};
use invlab_core::nn::Mlp;
use invlab_core::rng::rng_from;

fn bench_batch_eval(c: &mut Criterion) {
    let spec = FactorSpec::vector_concat(10, 10, 8, 8, 0.25, 1.3, 2.6, 7).unwrap();
    let data = generate(&spec, 0.99, SplitSizes { train: 100, val: 100, test: 8000 }, 1).unwrap();
    let mut rng = rng_from(3);
    let mlp = Mlp::new(&[spec.observation_dim(), 64, 64, 32], &mut rng).unwrap();
    let xs = data.test.all_observations();

    let mut group = c.benchmark_group("batch_eval_8k");
    for chunk in [64usize, 256] {
        group.bench_with_input(BenchmarkId::new("parallel", chunk), &chunk, |b, &chunk| {
            b.iter(|| forward_chunked(&mlp, &xs, chunk));
        });
        group.bench_with_input(BenchmarkId::new("sequential", chunk), &chunk, |b, &chunk| {
            b.iter(|| forward_chunked_seq(&mlp, &xs, chunk));
        });
    }
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let spec = FactorSpec::vector_concat(10, 10, 8, 8, 0.25, 1.3, 2.6, 7).unwrap();
    let sizes = SplitSizes { train: 5000, val: 100, test: 100 };

    let mut group = c.benchmark_group("generate_5k");
    group.bench_function("parallel", |b| {
        b.iter(|| generate(&spec, 0.99, sizes, 11).unwrap());
    });
    group.bench_function("sequential_1_thread", |b| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        b.iter(|| pool.install(|| generate(&spec, 0.99, sizes, 11).unwrap()));
    });
    group.finish();
}

criterion_group!(benches, bench_batch_eval, bench_generation);
criterion_main!(benches);
