use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rkd_bench::dgp_sample;
use rkd_core::bandwidth::{algorithm1_bandwidths, BandwidthOptions, Transform};
use rkd_core::estimands::{rkd_quantile, Bandwidths, KinkDesign};
use rkd_core::kernel::kernel_constants;
use rkd_core::regression::{fit_constrained_quantile, fit_constrained_wls};
use rkd_core::Kernel;
use std::hint::black_box;

fn kernel_algebra(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_constants");
    for p in [1, 2, 3] {
        g.bench_with_input(BenchmarkId::from_parameter(p), &p, |b, &p| {
            b.iter(|| kernel_constants(Kernel::Tricube, black_box(p), &[p + 1, p + 2]).unwrap())
        });
    }
    g.finish();
}

fn local_fits(c: &mut Criterion) {
    let s = dgp_sample(4000);
    c.bench_function("wls_p2_n4000", |b| {
        b.iter(|| fit_constrained_wls(&s.y, &s.x, 0.0, 2, black_box(0.3), Kernel::Tricube).unwrap())
    });
    c.bench_function("quantile_p2_n4000", |b| {
        b.iter(|| fit_constrained_quantile(&s.y, &s.x, black_box(0.5), 0.0, 2, 0.3, Kernel::Tricube).unwrap())
    });
    let design = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
    let taus: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    c.bench_function("quantile_curve_9_levels_n4000", |b| {
        b.iter(|| rkd_quantile(&s, &design, &taus, 2, &Bandwidths::Shared(0.3), Kernel::Tricube).unwrap())
    });
}

fn bandwidths(c: &mut Criterion) {
    let s = dgp_sample(2000);
    let opts = BandwidthOptions::default();
    c.bench_function("plug_in_mean_n2000", |b| {
        b.iter(|| algorithm1_bandwidths(&s, 0.0, &[0.0], Transform::Identity, &opts).unwrap())
    });
}

criterion_group!(benches, kernel_algebra, local_fits, bandwidths);
criterion_main!(benches);
