use rkd_core::estimands::{rkd_distributional, rkd_mean, Bandwidths, EffectKind, KinkDesign};
use rkd_core::pipeline::{analyze, AnalysisConfig, BandwidthOverrides, YGrid};
use rkd_core::simulation::{generate_dgp, true_effects, DgpConfig};
use rkd_core::{Kernel, Sample};

fn small_config() -> AnalysisConfig {
    AnalysisConfig {
        tau_grid: vec![0.2, 0.4, 0.6, 0.8],
        integration_grid: (1..=49).map(|i| i as f64 / 50.0).collect(),
        reps: 150,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn full_analysis_on_the_simulation_design() {
    let dgp = DgpConfig { n: 2000, seed: 4, ..Default::default() };
    let s = generate_dgp(&dgp).unwrap();
    let a = analyze(&s, &dgp.design(), &EffectKind::ALL, &small_config()).unwrap();
    assert_eq!(a.n, 2000);
    assert!(a.fx > 0.0);
    for e in &a.effects {
        let c = &e.curve;
        let (lo, hi) = (c.band_lo.as_ref().unwrap(), c.band_hi.as_ref().unwrap());
        for j in 0..c.grid.len() {
            assert!(lo[j] <= c.estimates[j] && c.estimates[j] <= hi[j], "{:?}", c.kind);
            assert!(c.bandwidths[j] > 0.0);
        }
        let t = e.significance.unwrap();
        assert!((0.0..=1.0).contains(&t.p_value));
        assert!(e.critical_value.unwrap() > 0.0);
    }
    // The mean effect is well identified on this design.
    let mean = a.effect(EffectKind::Mean).unwrap();
    assert!((mean.curve.estimates[0] - 0.5).abs() < 0.5);
    assert!(mean.significance.unwrap().reject);
    let lorenz = a.effect(EffectKind::Lorenz).unwrap();
    assert!(lorenz.selection.as_ref().unwrap().baseline.is_some());
}

#[test]
fn analysis_is_deterministic_in_the_seed() {
    let dgp = DgpConfig { n: 1200, seed: 5, ..Default::default() };
    let s = generate_dgp(&dgp).unwrap();
    let effects = [EffectKind::Mean, EffectKind::Quantile];
    let run = |seed| {
        let cfg = AnalysisConfig { seed, ..small_config() };
        serde_json::to_string(&analyze(&s, &dgp.design(), &effects, &cfg).unwrap()).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn noiseless_piecewise_quadratic_is_recovered_exactly() {
    let x: Vec<f64> = (0..400).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 400.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&x| if x >= 0.0 { 2.0 + 3.0 * x - x * x } else { 2.0 + 0.5 * x + 2.0 * x * x })
        .collect();
    let s = Sample::new(y, x).unwrap();
    let design = KinkDesign::new(0.0, 0.0, 0.5).unwrap();
    for kernel in [Kernel::Tricube, Kernel::Epanechnikov, Kernel::Uniform] {
        let c = rkd_mean(&s, &design, 2, 0.4, kernel).unwrap();
        assert!((c.estimates[0] - 5.0).abs() < 1e-9, "{kernel}: {}", c.estimates[0]);
    }
}

#[test]
fn distributional_effect_vanishes_where_the_indicator_is_constant() {
    let dgp = DgpConfig { n: 800, seed: 6, ..Default::default() };
    let s = generate_dgp(&dgp).unwrap();
    let top = s.y.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
    let c = rkd_distributional(&s, &dgp.design(), &[top], 2, &Bandwidths::Shared(0.4), Kernel::Tricube).unwrap();
    assert!(c.estimates[0].abs() < 1e-10);
}

#[test]
fn fixed_bandwidth_override_is_respected() {
    let dgp = DgpConfig { n: 1000, seed: 7, ..Default::default() };
    let s = generate_dgp(&dgp).unwrap();
    let cfg = AnalysisConfig {
        overrides: BandwidthOverrides::all(0.35),
        y_grid: YGrid::Values(vec![0.9, 1.0, 1.1]),
        reps: 0,
        ..small_config()
    };
    let a = analyze(&s, &dgp.design(), &[EffectKind::Mean, EffectKind::Distributional], &cfg).unwrap();
    for e in &a.effects {
        assert!(e.curve.bandwidths.iter().all(|h| *h == 0.35));
        assert!(e.curve.band_lo.is_none());
    }
    let d = a.effect(EffectKind::Distributional).unwrap();
    assert_eq!(d.curve.grid, vec![0.9, 1.0, 1.1]);
    let truth = true_effects(&dgp, EffectKind::Distributional, &d.curve.grid);
    assert!(truth.iter().all(|t| t.is_finite()));
}
