//! Rayon against the sequential fallback on the two hot paths: per-sample
//! forward/backward (the body of a training step) and a full training epoch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use owsol::encoder::{self, EncoderConfig};
use owsol::par;
use owsol::params::HyperParams;
use owsol::synthgen::{generate_dataset, GenConfig};
use owsol::trainer::{init_state, train, Mode, TrainConfig};

fn per_sample(c: &mut Criterion) {
    let ds = generate_dataset(&GenConfig::default()).unwrap();
    let images: Vec<_> = ds.training().map(|s| s.image.clone()).collect();
    let params = init_state(EncoderConfig::default(), 0).unwrap().online;
    let work = |img: &owsol::data::ToyImage| {
        let cache = encoder::forward(&params, img).unwrap();
        let mut grads = params.zeros_like();
        encoder::backward_into(&params, &cache, &cache.z, &mut grads);
        grads
    };
    let mut g = c.benchmark_group("forward_backward_960");
    g.bench_function("sequential", |b| b.iter(|| par::seq::map(&images, work)));
    g.bench_function("rayon", |b| b.iter(|| par::map(&images, work)));
    g.finish();
}

fn epoch(c: &mut Criterion) {
    let ds = generate_dataset(&GenConfig::default()).unwrap();
    let cfg = TrainConfig::new(
        HyperParams {
            epochs: 1,
            ..HyperParams::default()
        },
        Mode::Colearn,
    );
    let cap = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut g = c.benchmark_group("colearn_epoch");
    g.sample_size(10);
    for workers in [1, cap] {
        g.bench_with_input(BenchmarkId::new("workers", workers), &workers, |b, &w| {
            b.iter(|| par::with_workers(w, || train(&ds, &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, per_sample, epoch);
criterion_main!(benches);
