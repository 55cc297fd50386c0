//! Sequential against parallel execution on the hot loops: carrier scoring,
//! the watermark loss, the Monte Carlo null, and bundle construction.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graphmark::calibration::{monte_carlo_null_with, AuditThresholds};
use graphmark::carrier::{build_bundle_with, ProtocolParams};
use graphmark::io::make_synthetic_task;
use graphmark::nn::{Hyper, Model};
use graphmark::watermark::{verify_with, wm_loss_with};
use graphmark::Exec;
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("Sequential", Exec::Sequential), ("Parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let task = make_synthetic_task(200, 0).unwrap();
    let train = task.train_graphs();
    let bundle = build_bundle_with(Exec::Parallel, &train, 64, &ProtocolParams::with_seed(0)).unwrap();
    let model = Model::new(Hyper::default(), 0).unwrap();
    let th = AuditThresholds::with_tau(64, 48, 0.0);

    let mut g = c.benchmark_group("verify");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| verify_with(exec, &model, black_box(&bundle), &th).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("wm_loss");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| wm_loss_with(exec, &model, black_box(&bundle)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("mc_null");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| monte_carlo_null_with(exec, 128, 70, black_box(20_000), 0))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("build_bundle");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_bundle_with(exec, black_box(&train), 16, &ProtocolParams::with_seed(1)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
