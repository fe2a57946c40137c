use std::cell::RefCell;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dermo_core::autograd::{Padding, Tape};
use dermo_core::net::{DermoNet, NetworkConfig, Outputs};
use dermo_core::nn::{init_module, Conv2d, Ctx};
use dermo_core::{par, rng, Tensor};

const MODES: [(&str, bool); 2] = [("serial", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    let x = Tensor::he_normal(&[4, 96, 128, 16], 1, 16).unwrap();
    let mut layer = Conv2d::new(3, 16, 32, 1, Padding::Same).unwrap();
    init_module(&mut layer, &mut rng::seeded(2)).unwrap();
    for (name, parallel) in MODES {
        par::set_parallel(parallel);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let ctx = Ctx::eval(&tape);
                let y = layer.forward(&ctx, tape.var(x.clone())).unwrap();
                tape.backward(y.mean().unwrap()).unwrap();
            })
        });
    }
    group.finish();
}

fn toy_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("toy_net_train_step");
    group.sample_size(10);
    let net = DermoNet::new(NetworkConfig::toy(), 3).unwrap();
    let x = Tensor::he_normal(&[2, 192, 256, 3], 4, 3).unwrap();
    for (name, parallel) in MODES {
        par::set_parallel(parallel);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let stream = RefCell::new(rng::seeded(5));
                let tape = Tape::new();
                let ctx = Ctx::train(&tape, &stream);
                let out = net.forward(&ctx, tape.constant(x.clone()), Outputs::Mask).unwrap();
                tape.backward(out.mask_probs.unwrap().mean().unwrap()).unwrap();
            })
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, conv, toy_step);
criterion_main!(benches);
