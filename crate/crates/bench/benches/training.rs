use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dietcp::data::{augment, AugmentConfig, Split};
use dietcp::diet::{diet_step, init_head, DietBatch, HeadInit, LossConfig, RepresentationSource};
use dietcp::eval::{knn_classify, EmbeddingMatrix};
use dietcp::optim::{AdamW, OptimConfig};
use dietcp::synthetic::{generate, Distribution};
use dietcp::rng;
use dietcp::vit::{random_batch, BackboneParams, ViTConfig};

fn diet_steps(c: &mut Criterion) {
    let cfg = ViTConfig::default();
    let batch = DietBatch {
        images: random_batch(32, &cfg, 1),
        indices: (0..32).collect(),
    };
    for k in [0usize, 2] {
        let mut bb = BackboneParams::init(cfg.clone(), 0).unwrap();
        bb.set_trainable(k).unwrap();
        let mut head = init_head(cfg.dim, 256, 0, HeadInit::Normal).unwrap();
        let mut opt = AdamW::new(&OptimConfig::default());
        c.bench_function(&format!("diet_step_b32_unfrozen{k}"), |b| {
            b.iter(|| diet_step(&mut bb, &mut head, &batch, &LossConfig::default(), &mut opt, 1e-4).unwrap())
        });
    }
    let bb = BackboneParams::init(cfg.clone(), 0).unwrap();
    c.bench_function("encode_b32", |b| b.iter(|| bb.encode(black_box(&batch.images)).unwrap()));
}

fn augmentation(c: &mut Criterion) {
    let ds = generate(Distribution::Target, 1, 32, Split::Train, 0).unwrap();
    let img = ds.image(0).clone();
    let cfg = AugmentConfig::default();
    let mut r = rng::stream(0, "bench", &[]);
    c.bench_function("augment_32px", |b| b.iter(|| augment(black_box(&img), &cfg, &mut r)));
}

fn knn(c: &mut Criterion) {
    let make = |n: usize| {
        let rows = (0..n * 64).map(|i| ((i * 7919 % 1000) as f32 / 500.0 - 1.0) * (i as f32).sin()).collect();
        let labels = (0..n).map(|i| i % 6).collect();
        EmbeddingMatrix::new(rows, 64, labels, RepresentationSource::Cls).unwrap().normalized()
    };
    let train = make(1000);
    let query = make(1000);
    c.bench_function("knn_1000x1000_k20", |b| b.iter(|| knn_classify(&train, &query, 20).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = diet_steps, augmentation, knn
}
criterion_main!(benches);
