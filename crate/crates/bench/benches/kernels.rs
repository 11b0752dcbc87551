use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use anprompt::losses::{gamma, waloss, GammaMode, LossWeights, WaDistance};
use anprompt::prompting::{kmeans_cluster, KMeansParams};
use anprompt_bench::{default_encoder, image, prompts, random_matrix};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)))
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let (enc, spec) = default_encoder();
    let cfg = enc.config().clone();
    let p = prompts(&spec, cfg.embed_dim);
    let img = image(&cfg, 3);
    c.bench_function("encode_image_prompted", |b| {
        b.iter(|| enc.encode_image_prompted(black_box(&img), &p, &spec).unwrap())
    });
    let sentence = [4, 5, 6, 7, 8];
    c.bench_function("encode_text_prompted", |b| {
        b.iter(|| enc.encode_text_prompted(black_box(&sentence), &p, &spec).unwrap())
    });
}

fn kmeans(c: &mut Criterion) {
    let features = random_matrix(64, 64, 4);
    let params = KMeansParams::default();
    c.bench_function("kmeans_64x64_k5", |b| {
        b.iter(|| kmeans_cluster(black_box(&features), 5, 0, &params).unwrap())
    });
}

fn alignment(c: &mut Criterion) {
    let l_a = random_matrix(4, 8, 5);
    let l_w = random_matrix(4, 8, 6);
    let w = LossWeights::default();
    c.bench_function("waloss_kl_4x8", |b| {
        b.iter(|| waloss(black_box(&l_a), black_box(&l_w), WaDistance::Kl).unwrap())
    });
    c.bench_function("gamma_variance_adaptive_4x8", |b| {
        b.iter(|| gamma(black_box(&l_a), GammaMode::VarianceAdaptive, w.eps0, &w).unwrap())
    });
}

criterion_group!(benches, matmul, encoder, kmeans, alignment);
criterion_main!(benches);
