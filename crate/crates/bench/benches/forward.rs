use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dbd_core::autograd::{ConvOpts, Graph};
use dbd_core::data::{preprocess, synthetic_dataset};
use dbd_core::engine::{train_step, Batch, TrainConfig, TrainState};
use dbd_core::metrics::{evaluate_maps, EvalOptions};
use dbd_core::network::Model;
use dbd_core::params::normal;
use dbd_core::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for size in [96, 320] {
        let cfg = TrainConfig::tiny(size);
        let model = Model::new(cfg.model_config()).unwrap();
        let params = model.init_params(0);
        let image = Tensor::full(Shape::new(1, 3, size, size), 0.1);
        group.bench_function(format!("tiny_{size}"), |b| {
            b.iter(|| model.predict(&params, black_box(&image)).unwrap())
        });
    }
    group.finish();
}

fn train(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let cfg = TrainConfig {
        batch_size: 6,
        ..TrainConfig::tiny(96)
    };
    let model = Model::new(cfg.model_config()).unwrap();
    let samples = synthetic_dataset(6, (96, 96), 0);
    let prepared: Vec<_> = samples
        .iter()
        .map(|s| preprocess(s, (96, 96), false, &cfg.backbone).unwrap())
        .collect();
    let batch = Batch::collate(&prepared.iter().collect::<Vec<_>>()).unwrap();
    let mut state = TrainState::init(&model, &cfg).unwrap();
    group.bench_function("tiny_96_batch6", |b| {
        b.iter(|| train_step(&model, &mut state, black_box(&batch), &cfg).unwrap())
    });
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = normal(Shape::new(1, 32, 48, 48), 1.0, &mut rng);
    let w = normal(Shape::new(32, 32, 3, 3), 0.1, &mut rng);
    for dilation in [1, 7] {
        c.bench_function(&format!("conv3x3_32ch_48px_d{dilation}"), |b| {
            b.iter(|| {
                let mut g = Graph::inference();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                g.conv2d(xv, wv, None, ConvOpts::same(3, dilation)).unwrap()
            })
        });
    }
}

fn metrics(c: &mut Criterion) {
    let samples: Vec<(Tensor, Tensor)> = synthetic_dataset(4, (320, 320), 1)
        .into_iter()
        .map(|s| (s.image.narrow_channels(0, 1).unwrap(), s.mask))
        .collect();
    c.bench_function("evaluate_4x320", |b| {
        b.iter(|| evaluate_maps(black_box(&samples), EvalOptions::default()).unwrap())
    });
}

criterion_group!(benches, forward, train, conv, metrics);
criterion_main!(benches);
