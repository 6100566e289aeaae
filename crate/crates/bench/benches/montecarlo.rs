use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;
use svph_core::limit_laws::simulate_ensemble;
use svph_core::{FourierTable, InitialMeasure, MapSpec, Observable, TorusPoint};

fn bench_ensemble(c: &mut Criterion) {
    let spec = MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let m = InitialMeasure::uniform();
    let mut g = c.benchmark_group("ensemble");
    g.sample_size(10);
    g.throughput(Throughput::Elements(1000 * 1024));
    g.bench_function("doubling_1k_x_1024", |b| {
        b.iter(|| simulate_ensemble(&spec, &obs, &m, &[1024], 1000, black_box(7)).unwrap())
    });
    g.finish();
}

fn bench_birkhoff(c: &mut Criterion) {
    let spec = MapSpec::fast_slow(3, FourierTable::sin(0.05, 1, 1), FourierTable::cos(1.0, 1, 0), 0.1).unwrap();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let p = TorusPoint::new(0.2, 0.4);
    c.bench_function("birkhoff_sum/fast_slow_1024", |b| b.iter(|| spec.birkhoff_sum(&obs, black_box(p), 1024)));
}

criterion_group!(benches, bench_ensemble, bench_birkhoff);
criterion_main!(benches);
