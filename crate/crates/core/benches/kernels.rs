//! Parallel vs sequential kernels. Both paths produce bit-identical
//! results, so the comparison is purely about wall time.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stacked_bnas::autodiff::{ConvGeom, OptimizerState, Shape, Tape, Tensor};
use stacked_bnas::data::{synth_dataset, SynthSpec};
use stacked_bnas::par::set_parallel;
use stacked_bnas::search::weight_step;
use stacked_bnas::space::StackedBcnnConfig;
use stacked_bnas::supernet::{Supernet, SupernetConfig};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(Shape::new(16, 32, 16, 16), &mut rng);
    let w = random(Shape::new(32, 32, 3, 3), &mut rng);
    let geom = ConvGeom::new(1, 1);

    let mut g = c.benchmark_group("conv3x3 16x32x16x16");
    for (name, on) in MODES {
        set_parallel(on);
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                tape.conv2d(xv, wv, geom).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("forward+backward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
                let y = tape.conv2d(xv, wv, geom).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
    set_parallel(true);
}

fn supernet_step(c: &mut Criterion) {
    let space = StackedBcnnConfig {
        u: 2,
        k: 1,
        c: 8,
        n_in: 4,
        num_classes: 4,
        input_size: 8,
        input_channels: 3,
        ..StackedBcnnConfig::default()
    };
    let data = synth_dataset(&SynthSpec::separable(16), 0).unwrap();
    let batch = data.batch(&(0..32).collect::<Vec<_>>());

    let mut g = c.benchmark_group("supernet weight step");
    g.sample_size(10);
    for (name, on) in MODES {
        set_parallel(on);
        let mut net = Supernet::new(&space, SupernetConfig::default(), 0).unwrap();
        let mut opt = OptimizerState::sgd(0.025, 0.9, 3e-4);
        g.bench_function(name, |b| b.iter(|| weight_step(&mut net, &batch, &mut opt, Some(5.0)).unwrap()));
    }
    g.finish();
    set_parallel(true);
}

criterion_group!(benches, conv, supernet_step);
criterion_main!(benches);
