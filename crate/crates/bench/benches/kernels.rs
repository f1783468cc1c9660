use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deepnorm_bench::{desk_model, desk_train, matrix};
use deepnorm_core::autodiff::{layer_norm, matmul};
use deepnorm_core::model::{attention_forward, AttentionTensors, NormKind};
use deepnorm_core::train::train_model;
use std::hint::black_box;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let (a, b) = (matrix(n, n, "a"), matrix(n, n, "b"));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    }
    group.finish();
}

fn bench_layer_norm(c: &mut Criterion) {
    let x = matrix(64, 64, "x");
    c.bench_function("layer_norm_64x64", |b| b.iter(|| layer_norm(black_box(&x), 1e-5).unwrap()));
}

fn bench_attention(c: &mut Criterion) {
    let x = matrix(64, 64, "x");
    let w: Vec<_> = ["q", "k", "v", "o"].iter().map(|n| matrix(64, 64, n)).collect();
    let tensors = || AttentionTensors { w_q: &w[0], w_k: &w[1], w_v: &w[2], w_o: &w[3] };
    c.bench_function("attention_seq64_d64_h4", |b| b.iter(|| attention_forward(black_box(&x), &x, tensors(), 4, true).unwrap()));
}

fn bench_train_steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_10_steps");
    group.sample_size(10);
    for (depth, norm) in [(6, NormKind::DeepNorm), (6, NormKind::PostLn), (12, NormKind::DeepNorm)] {
        let model = desk_model(depth, norm);
        let cfg = desk_train(10);
        group.bench_function(format!("{}_{depth}L", norm.as_str()), |b| {
            b.iter(|| train_model(model.clone(), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_layer_norm, bench_attention, bench_train_steps);
criterion_main!(benches);
