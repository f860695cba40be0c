use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mma_bench::random_vec;
use mma_core::kernels::{matmul_nn, matmul_nt};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = random_vec(n * n, 1);
        let b = random_vec(n * n, 2);
        let mut out = vec![0.0f32; n * n];
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("nn", n), &n, |bench, &n| {
            bench.iter(|| matmul_nn(black_box(&a), black_box(&b), &mut out, n, n, n))
        });
        group.bench_with_input(BenchmarkId::new("nt", n), &n, |bench, &n| {
            bench.iter(|| matmul_nt(black_box(&a), black_box(&b), &mut out, n, n, n))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul);
criterion_main!(benches);
