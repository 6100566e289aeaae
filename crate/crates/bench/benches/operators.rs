use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use svph_core::{assemble, spectrum, FourierTable, MapSpec, Observable, TorusPoint};

fn doubling() -> MapSpec {
    MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap()
}

fn bench_assemble(c: &mut Criterion) {
    let spec = doubling();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let mut g = c.benchmark_group("assemble");
    for k in [4usize, 8] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| assemble(&spec, &obs, black_box(0.3), k, 64).unwrap())
        });
    }
    g.finish();
}

fn bench_spectrum(c: &mut Criterion) {
    let spec = doubling();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let mut g = c.benchmark_group("spectrum");
    g.sample_size(10);
    for k in [6usize, 8] {
        let m = assemble(&spec, &obs, 0.0, k, 64).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(k), &m, |b, m| b.iter(|| spectrum(m, 12).unwrap()));
    }
    g.finish();
}

fn bench_preimages(c: &mut Criterion) {
    let linear = doubling();
    let general = MapSpec::skew_general(3, FourierTable::sin(0.05, 1, 0), FourierTable::cos(0.1, 1, 0)).unwrap();
    let p = TorusPoint::new(0.37, 0.61);
    c.bench_function("preimages/linear", |b| b.iter(|| linear.preimages(black_box(p)).unwrap()));
    c.bench_function("preimages/newton", |b| b.iter(|| general.preimages(black_box(p)).unwrap()));
}

criterion_group!(benches, bench_assemble, bench_spectrum, bench_preimages);
criterion_main!(benches);
