use criterion::{criterion_group, criterion_main, Criterion};
use rkd_bench::dgp_sample;
use rkd_core::estimands::{rkd_mean, EffectKind, KinkDesign};
use rkd_core::inference::{multiplier_for_curve, pivotal_draws, ProcessSetup};
use rkd_core::pipeline::{analyze, AnalysisConfig};
use rkd_core::simulation::{run_study, StudyConfig};
use rkd_core::Kernel;

fn draws(c: &mut Criterion) {
    let s = dgp_sample(2000);
    let design = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
    let setup = ProcessSetup::new(&design, 2.2, Kernel::Tricube, 2).unwrap();
    let curve = rkd_mean(&s, &design, 2, 0.3, Kernel::Tricube).unwrap();
    c.bench_function("multiplier_500_draws_n2000", |b| {
        b.iter(|| multiplier_for_curve(&s, &setup, &curve, 500, 7).unwrap())
    });
    let taus: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
    let hs = vec![0.3; taus.len()];
    let fyx = vec![3.0; taus.len()];
    c.bench_function("pivotal_500_draws_99_levels_n2000", |b| {
        b.iter(|| pivotal_draws(&s.x, &setup, &taus, &hs, &fyx, 500, 7).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    let s = dgp_sample(2000);
    let design = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
    let cfg = AnalysisConfig { reps: 500, ..Default::default() };
    g.bench_function("analyze_mean_quantile_n2000", |b| {
        b.iter(|| analyze(&s, &design, &[EffectKind::Mean, EffectKind::Quantile], &cfg).unwrap())
    });
    let study = StudyConfig {
        effects: vec![EffectKind::Mean],
        n_list: vec![1000],
        reps: 8,
        boot: 100,
        workers: Some(1),
        ..Default::default()
    };
    g.bench_function("study_mean_8_reps_n1000", |b| b.iter(|| run_study(&study).unwrap()));
    g.finish();
}

criterion_group!(benches, draws, pipeline);
criterion_main!(benches);
