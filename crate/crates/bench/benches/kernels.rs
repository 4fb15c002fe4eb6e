use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfe_core::autodiff::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use sfe_core::data::{plain_batch, DatasetSpec};
use sfe_core::heads::joint_loss;
use sfe_core::trainer::{ExperimentConfig, Trainer};
use sfe_core::{AttachmentMode, AttachmentPlan, ChannelPartition, Graph, Tensor};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn conv(c: &mut Criterion) {
    let mut r = rng();
    let (xs, ws) = ([32, 16, 32, 32], [16, 16, 3, 3]);
    let g = ConvGeometry::new(&xs, &ws, 1, 1).unwrap();
    let x = Tensor::<f32>::rand_uniform(xs.to_vec(), -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::rand_uniform(ws.to_vec(), -0.1, 0.1, &mut r);
    let dy = Tensor::<f32>::rand_uniform(vec![32, 16, 32, 32], -1.0, 1.0, &mut r);
    c.bench_function("conv3x3 forward 32x16x32x32", |b| {
        b.iter(|| conv2d_forward(&g, x.data(), w.data(), None))
    });
    c.bench_function("conv3x3 backward 32x16x32x32", |b| {
        b.iter(|| conv2d_backward(&g, x.data(), w.data(), dy.data(), true, true, false))
    });
}

fn expand(c: &mut Criterion) {
    let mut r = rng();
    let f = Tensor::<f32>::rand_uniform(vec![64, 64, 8, 8], -1.0, 1.0, &mut r);
    let p = ChannelPartition::random(64, 8, &mut r).unwrap();
    c.bench_function("expand k=8 64x64x8x8", |b| b.iter(|| p.expand(&f).unwrap()));
}

fn loss(c: &mut Criterion) {
    let mut r = rng();
    let (n, k, batch) = (10, 9, 64);
    let z = Tensor::<f32>::rand_uniform(vec![k * batch, n * k], -3.0, 3.0, &mut r);
    let labels: Vec<usize> = (0..batch).map(|i| i % n).collect();
    c.bench_function("joint loss fwd+bwd N=10 K=9 B=64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let zv = g.leaf(z.clone(), true);
            let l = joint_loss(&mut g, zv, &labels, n, k).unwrap();
            g.backward(l).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train step 3x32x32 B=64");
    group.sample_size(10);
    for (name, plan) in [
        ("baseline", AttachmentPlan::baseline()),
        (
            "two k=8",
            AttachmentPlan {
                mode: AttachmentMode::TwoClassifier,
                k: 8,
                ..AttachmentPlan::default()
            },
        ),
    ] {
        let mut cfg = ExperimentConfig::quick_synthetic();
        cfg.backbone.stage_channels = vec![16, 32, 64];
        cfg.backbone.input_shape = [3, 32, 32];
        cfg.plan = plan;
        cfg.dataset = DatasetSpec::Synthetic {
            classes: 4,
            per_class: 16,
            test_per_class: 1,
            size: [3, 32, 32],
            seed: 0,
        };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let (x, y) = plain_batch::<f32>(&t.train_set, &idx, &t.normalization()).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| t.train_step(&x, &y, 0.01).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, expand, loss, train_step);
criterion_main!(benches);
