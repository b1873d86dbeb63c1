use bipoint::xnor_popcount_matmul;
use bipoint_bench::sign_pair;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn square(c: &mut Criterion) {
    let mut group = c.benchmark_group("square");
    for n in [64usize, 256, 1024] {
        let pair = sign_pair(n, n, n, n as u64);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("packed", n), &pair, |bch, p| {
            bch.iter(|| xnor_popcount_matmul(black_box(&p.a_packed), black_box(&p.b_packed)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("real", n), &pair, |bch, p| {
            bch.iter(|| black_box(&p.a).matmul_nt(black_box(&p.b)).unwrap())
        });
    }
    group.finish();
}

// Layer-shaped products: a batch of 64 clouds × 256 points against a weight matrix.
fn layer_shapes(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer");
    group.sample_size(20);
    for (k, out) in [(64usize, 64usize), (64, 128), (128, 256), (100, 100)] {
        let pair = sign_pair(64 * 256, out, k, (k * out) as u64);
        let id = format!("{k}x{out}");
        group.bench_with_input(BenchmarkId::new("packed", &id), &pair, |bch, p| {
            bch.iter(|| xnor_popcount_matmul(&p.a_packed, &p.b_packed).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("real", &id), &pair, |bch, p| {
            bch.iter(|| p.a.matmul_nt(&p.b).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, square, layer_shapes);
criterion_main!(benches);
