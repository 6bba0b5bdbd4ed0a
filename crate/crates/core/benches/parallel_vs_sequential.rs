//! Per-sample kernels on the default rayon pool against a one-thread pool.
//!
//! A fully sequential build (no rayon at all) is measured with
//! `cargo bench --no-default-features`, where both groups run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use goalcomp::harness::{gen_synthetic, Model, SyntheticParams};
use goalcomp::precoding::{fit_linear_precoder, gradient, klt_basis};
use goalcomp::quantization::{codebook_goal_loss, fit_goq};
use goalcomp::{Norm, TaskSpec, TrainConfig};
use rayon::ThreadPoolBuilder;

fn kernels(c: &mut Criterion) {
    let data = gen_synthetic(1000, 48, 7, &SyntheticParams::default()).unwrap();
    let spec = TaskSpec::new(Norm::Infinity, 50.0).unwrap();
    let klt = klt_basis(&data, 2).unwrap();
    let cfg = TrainConfig {
        it_max: 5,
        ..TrainConfig::default()
    };
    let lt = fit_linear_precoder(&data, &spec, 2, &cfg).unwrap().precoder;
    let codebook = fit_goq(&data, &lt, &spec, 6, &TrainConfig { j_max: 2, ..cfg.clone() })
        .unwrap()
        .codebook;

    let one = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = ThreadPoolBuilder::new().build().unwrap();
    let pools = [("1-thread", &one), ("default", &all)];

    let mut group = c.benchmark_group("gradient");
    group.sample_size(10);
    for (name, pool) in pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(gradient(&klt, &data, &spec).unwrap())))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("goq_assignment");
    group.sample_size(10);
    for (name, pool) in pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(codebook_goal_loss(&codebook, &data, &lt, &spec).unwrap())))
        });
    }
    group.finish();

    let model = Model::Linear(lt.clone());
    let mut group = c.benchmark_group("rsol");
    for (name, pool) in pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(model.rsol(&data, &spec).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
