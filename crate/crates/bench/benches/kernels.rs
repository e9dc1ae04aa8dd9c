use criterion::{criterion_group, criterion_main, Criterion};
use jdl_core::sampling::{guided_epsilon, GuidanceConfig, GuidanceStats};
use jdl_core::{rng, Graph, JointModel, NoiseSchedule, Tensor, UNetConfig};

fn small_unet() -> UNetConfig {
    UNetConfig { base_channels: 8, channel_multipliers: vec![1, 2, 2], time_embed_dim: 32, classifier_hidden: 64, ..UNetConfig::default() }
}

fn normals(shape: &[usize], tag: &str) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(&mut rng::stream(0, tag, 0), n)).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = normals(&[16, 16, 32, 32], "x");
    let w = normals(&[16, 16, 3, 3], "w");
    c.bench_function("conv2d 16x16x32x32 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap()
        })
    });
}

fn unet(c: &mut Criterion) {
    let m = JointModel::new(small_unet(), 0).unwrap();
    let z = normals(&[16, 1, 32, 32], "z");
    let t = vec![100; 16];
    c.bench_function("unet forward batch 16", |b| b.iter(|| m.denoise_forward(&z, &t).unwrap()));
}

fn sampler(c: &mut Criterion) {
    let m = JointModel::new(small_unet(), 0).unwrap();
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let z = normals(&[16, 1, 32, 32], "z");
    let g = GuidanceConfig::toward(2, 100.0);
    c.bench_function("guided epsilon batch 16", |b| {
        b.iter(|| {
            let mut stats = GuidanceStats::default();
            guided_epsilon(&m, &z, 100, &g, &sched, &mut stats).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, unet, sampler
}
criterion_main!(benches);
