use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use res2ctx::audio::{Waveform, CROP_SAMPLES, SAMPLE_RATE};
use res2ctx::blocks::{BlockConfig, ContextBlock, Variant};
use res2ctx::mel::{LogMel, MelConfig};
use res2ctx::model::{Model, ModelConfig};
use res2ctx::ops;
use res2ctx::params::{Mode, ParamStore, Session};
use res2ctx::Tensor;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("conv1d");
    for (ci, co, k) in [(64, 64, 3), (80, 64, 5), (192, 192, 1)] {
        let x = Tensor::randn(&[8, ci, 200], &mut rng);
        let w = Tensor::randn(&[co, ci, k], &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ci}x{co}x{k}")), &(x, w), |b, (x, w)| {
            b.iter(|| ops::conv1d(black_box(x), black_box(w), None, 2).unwrap())
        });
    }
    g.finish();
}

fn blocks(c: &mut Criterion) {
    let mut g = c.benchmark_group("block_fwd_bwd");
    g.sample_size(20);
    for v in Variant::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BlockConfig {
            channels: 64,
            scale: 4,
            kernel_size: 3,
            dilation: 2,
            se_bottleneck: 16,
            variant: v,
        };
        let mut store = ParamStore::new();
        let block = ContextBlock::new(&mut store, "b", &cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[8, 64, 200], &mut rng);
        g.bench_function(v.as_str(), |b| {
            b.iter(|| {
                let mut s = Session::new(&store, Mode::Train);
                let xv = s.input(x.clone(), true).unwrap();
                let y = block.forward(&mut s, xv).unwrap();
                let l = s.graph.sum_all(y).unwrap();
                s.param_grads(l).unwrap()
            })
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let m = Model::build(&ModelConfig::toy(64, Variant::SeBiRes2, 20), 0).unwrap();
    let x = Tensor::randn(&[80, 300], &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    g.bench_function("embed_toy_3s", |b| b.iter(|| m.embed(black_box(&x), Mode::Eval).unwrap()));
    g.finish();
}

fn features(c: &mut Criterion) {
    let lm = LogMel::new(MelConfig::default()).unwrap();
    let samples = (0..CROP_SAMPLES).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
    let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
    c.bench_function("logmel_2s", |b| b.iter(|| lm.compute(black_box(&w)).unwrap()));
}

criterion_group!(benches, conv, blocks, model, features);
criterion_main!(benches);
