use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saic_bench::{random_crop, reference_model};
use saic_core::model::init_networks;

fn forward(c: &mut Criterion) {
    let cfg = reference_model();
    let (ce, se, fd) = init_networks(&cfg, 1);
    let x = random_crop(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let content = ce.encode(&x).unwrap();
    let speaker = se.encode(&x).unwrap();
    c.bench_function("content_encode", |b| b.iter(|| ce.encode(black_box(&x)).unwrap()));
    c.bench_function("speaker_encode", |b| b.iter(|| se.encode(black_box(&x)).unwrap()));
    c.bench_function("fuse_decode", |b| b.iter(|| fd.decode(black_box(&speaker), black_box(&content)).unwrap()));
}

criterion_group!(benches, forward);
criterion_main!(benches);
