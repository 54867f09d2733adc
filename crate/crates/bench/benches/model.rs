use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gyrohyt::harness::{generate_synthetic, TeacherSpec};
use gyrohyt::model::{default_scale, forward, init_params, HyTConfig};
use gyrohyt::training::{gradients, Loss, TruncationLevel};

fn forward_backward(c: &mut Criterion) {
    let cfg = HyTConfig { dim: 8, tokens: 16, heads: 2, head_size: 4, ffn_hidden: 16, ..HyTConfig::default() };
    let params = init_params(&cfg, 1, default_scale(&cfg)).unwrap();
    let data = generate_synthetic(&TeacherSpec::random_hyt(cfg.clone(), 2, 0.05), 16, cfg.curvature, 3).unwrap();
    let batch = data.items();
    let x = batch[0].x.clone();

    c.bench_function("forward_d8_t16", |b| b.iter(|| forward(&params, &cfg, black_box(&x)).unwrap()));
    c.bench_function("gradients_batch16_plain", |b| {
        b.iter(|| gradients(&params, &cfg, black_box(batch), Loss::Plain).unwrap())
    });
    let m = TruncationLevel::new(1.5).unwrap();
    c.bench_function("gradients_batch16_truncated", |b| {
        b.iter(|| gradients(&params, &cfg, black_box(batch), Loss::Truncated(m)).unwrap())
    });
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
