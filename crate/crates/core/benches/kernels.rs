//! Hot kernels under the current build mode.
//!
//! Benchmark ids carry `parallel` or `sequential`, so
//! `scripts/bench_compare.sh` can run both builds into one report.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectlv_core::dp_prior::{generate_prior_with, DpParams};
use spectlv_core::net::{VNet, VNetConfig};
use spectlv_core::nn::{Tape, Tensor};
use spectlv_core::par;
use spectlv_core::phantom::{generate_phantom, phantom_suite};

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[4, 8, 16, 16, 16], &mut rng);
    let w = random(&[8, 8, 3, 3, 3], &mut rng);
    let b = random(&[8], &mut rng);
    c.benchmark_group("tape").bench_function(BenchmarkId::new("conv3d_fwd_bwd", mode()), |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let wv = tape.variable(w.clone());
            let bv = tape.variable(b.clone());
            let y = tape.conv3d(xv, wv, Some(bv), 1, 1).unwrap();
            let loss = tape.sum_squares(y);
            tape.backward(loss).unwrap()
        })
    });
}

fn warp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[8, 1, 32, 32, 32], &mut rng);
    let theta: Vec<f64> = (0..8)
        .flat_map(|_| {
            let mut t = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            t
        })
        .collect();
    let theta = Tensor::new(vec![8, 12], theta).unwrap();
    c.benchmark_group("tape").bench_function(BenchmarkId::new("warp_fwd_bwd", mode()), |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let tv = tape.variable(theta.clone());
            let y = tape.warp(xv, tv).unwrap();
            let loss = tape.sum_squares(y);
            tape.backward(loss).unwrap()
        })
    });
}

fn inference(c: &mut Criterion) {
    let phantom = generate_phantom(&phantom_suite(1, 3)[0]).unwrap();
    let gate = &phantom.study.gates()[0];
    let net = VNet::new(VNetConfig { in_channels: 1, ..VNetConfig::tiny() }, 4).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("vnet_tiny_predict", mode()), |bench| {
        bench.iter(|| net.predict(gate, None).unwrap())
    });
    let dp = DpParams::default();
    group.bench_function(BenchmarkId::new("dp_prior", mode()), |bench| {
        bench.iter(|| generate_prior_with(gate, &dp).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, warp, inference);
criterion_main!(benches);
