use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qxfer_core::resample::{normalize_b0, resample_qspace};
use qxfer_core::synth::{default_source_scheme, default_target_scheme, generate, PhantomConfig};
use qxfer_core::{design_matrix, QSpaceInterpolator, ShoreBasisSpec, ShoreFitter};

fn design(c: &mut Criterion) {
    let scheme = default_source_scheme();
    let spec = ShoreBasisSpec::default();
    c.bench_function("design_matrix/61x50", |b| b.iter(|| design_matrix(black_box(&scheme), &spec).unwrap()));
}

fn fit(c: &mut Criterion) {
    let scheme = default_source_scheme();
    let spec = ShoreBasisSpec::default();
    let fitter = ShoreFitter::from_spec(design_matrix(&scheme, &spec).unwrap(), &spec).unwrap();
    let signal: Vec<f64> = (0..scheme.len()).map(|i| (-(i as f64) * 0.03).exp()).collect();
    c.bench_function("fit/voxel", |b| b.iter(|| fitter.fit(black_box(&signal)).unwrap()));

    let interp = QSpaceInterpolator::between(&scheme, &default_target_scheme(), &spec).unwrap();
    c.bench_function("interpolate/voxel", |b| b.iter(|| interp.apply(black_box(&signal)).unwrap()));
}

fn resample(c: &mut Criterion) {
    let config = PhantomConfig { dims: [12; 3], noise_sigma: 0.0, ..PhantomConfig::default() };
    let target = default_target_scheme();
    let phantom = generate(&config, &default_source_scheme(), &target).unwrap();
    let norm = normalize_b0(&phantom.source).unwrap();
    let spec = ShoreBasisSpec::default();
    let mut group = c.benchmark_group("resample");
    group.sample_size(20);
    group.bench_function("phantom_12", |b| {
        b.iter(|| resample_qspace(black_box(&norm.dwi), &phantom.mask, &spec, &target).unwrap())
    });
    group.finish();
}

criterion_group!(benches, design, fit, resample);
criterion_main!(benches);
