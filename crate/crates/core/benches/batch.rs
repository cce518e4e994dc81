use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meterlora::batch::{estimate_per, run_batch, run_batch_sequential, seed_sweep};
use meterlora::link;
use meterlora::mac::DeviceClass;
use meterlora::sim::presets;

fn seed_sweeps(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    for count in [4u64, 16] {
        let runs = seed_sweep(&presets::ack_contention(DeviceClass::A), count);
        group.bench_with_input(BenchmarkId::new("rayon", count), &runs, |b, runs| {
            b.iter(|| run_batch(runs))
        });
        group.bench_with_input(BenchmarkId::new("sequential", count), &runs, |b, runs| {
            b.iter(|| run_batch_sequential(runs))
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let floor = link::demod_floor_db(9);
    c.bench_function("estimate_per_100k", |b| {
        b.iter(|| estimate_per(-100.0, floor, 9, 100_000, 1))
    });
}

criterion_group!(benches, seed_sweeps, monte_carlo);
criterion_main!(benches);
