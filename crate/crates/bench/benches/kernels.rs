use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use offnadir_core::losses::{combined_loss, LossConfig, LossName, MaskPair};
use offnadir_core::metrics::{binarize, confusion, DEFAULT_THRESHOLD};
use offnadir_core::models::{presets, Model};
use offnadir_core::tensor::{Graph, Shape, Tensor};

fn ramp(shape: Shape, scale: f32) -> Tensor<f32> {
    let n = shape.numel();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * scale).collect())
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(cin, cout, side) in &[(16usize, 32usize, 64usize), (64, 64, 32), (128, 128, 16)] {
        let x = ramp(Shape::new(2, cin, side, side), 1.0);
        let w = ramp(Shape::new(cout, cin, 3, 3), 0.1);
        g.bench_function(BenchmarkId::new("fwd_bwd", format!("{cin}x{cout}@{side}")), |b| {
            b.iter(|| {
                let mut graph = Graph::<f32>::new();
                let xv = graph.input(x.clone());
                let wv = graph.input(w.clone());
                let y = graph.conv2d(xv, wv, None, 1, 1, false);
                let r = graph.relu(y);
                let gp = graph.global_avg_pool(r);
                let grads = graph.backward(gp);
                black_box(grads);
            })
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let n = 4 * 64 * 64;
    let y: Vec<f32> = (0..n).map(|i| ((i / 37) % 2) as f32).collect();
    let p: Vec<f32> = (0..n).map(|i| 0.05 + 0.9 * ((i * 31 % 97) as f32 / 97.0)).collect();
    let mut g = c.benchmark_group("loss");
    for name in [LossName::Bce, LossName::Dice, LossName::Total] {
        let cfg = LossConfig { name, ..Default::default() };
        g.bench_function(format!("{name:?}"), |b| {
            b.iter(|| black_box(combined_loss(&cfg, MaskPair::new(&y, &p).unwrap())))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict_64px");
    g.sample_size(10);
    let x = ramp(Shape::new(1, 3, 64, 64), 1.0);
    for (name, spec) in presets(64) {
        let mut model = Model::<f32>::build(&spec, 0).unwrap();
        g.bench_function(name, |b| b.iter(|| black_box(model.predict(&x).unwrap())));
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let n = 256 * 256;
    let probs: Vec<f32> = (0..n).map(|i| (i * 13 % 101) as f32 / 100.0).collect();
    let gt: Vec<u8> = (0..n).map(|i| ((i / 50) % 2) as u8).collect();
    c.bench_function("confusion_256px", |b| {
        b.iter(|| black_box(confusion(&binarize(&probs, DEFAULT_THRESHOLD), &gt).unwrap()))
    });
}

criterion_group!(benches, conv, losses, forward, metrics);
criterion_main!(benches);
