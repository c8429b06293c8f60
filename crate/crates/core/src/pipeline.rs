//! End-to-end analysis: bandwidth selection, estimation and inference for a
//! set of effects on one sample.

use serde::{Deserialize, Serialize};

use crate::bandwidth::{
    algorithm1_bandwidths, fx_hat, lorenz_from_pieces, quantile_schedule, BandwidthOptions,
    BandwidthSchedule, DensityContext, DerivativeRule, Transform,
};
use crate::density::RuleOfThumb;
use crate::error::{Result, RkdError};
use crate::estimands::{
    default_integration_grid, default_reporting_grid, ldte_at_quantiles, rkd_distributional, rkd_lorenz,
    rkd_mean, rkd_quantile, Bandwidths, EffectCurve, EffectKind, KinkDesign, LorenzBandwidths,
};
use crate::inference::{
    homogeneity_test, lorenz_composite_draws, multiplier_draws, multiplier_for_curve, pivotal_draws,
    pointwise_se, significance_test, uniform_band, BootstrapEnsemble, Gram, ProcessPoint, ProcessSetup,
    TestResult, DEFAULT_REPS,
};
use crate::kernel::Kernel;
use crate::regression::{residuals, Sample};

/// Outcome values at which the distributional effect is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YGrid {
    /// The fitted conditional quantiles at the reporting levels.
    AtQuantiles,
    Values(Vec<f64>),
}

/// Fixed bandwidths that bypass the plug-in selectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distributional: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lorenz: Option<f64>,
}

impl BandwidthOverrides {
    pub fn all(h: f64) -> Self {
        BandwidthOverrides {
            mean: Some(h),
            distributional: Some(h),
            quantile: Some(h),
            lorenz: Some(h),
        }
    }

    pub fn get(&self, kind: EffectKind) -> Option<f64> {
        match kind {
            EffectKind::Mean => self.mean,
            EffectKind::Distributional => self.distributional,
            EffectKind::Quantile => self.quantile,
            EffectKind::Lorenz => self.lorenz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub p: usize,
    pub q: usize,
    pub kernel: Kernel,
    pub rule_of_thumb: RuleOfThumb,
    pub derivative_rule: DerivativeRule,
    pub process_gram: Gram,
    pub tau_grid: Vec<f64>,
    pub integration_grid: Vec<f64>,
    pub y_grid: YGrid,
    /// Number of simulated process draws; zero skips inference.
    pub reps: usize,
    pub level: f64,
    pub seed: u64,
    pub overrides: BandwidthOverrides,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            p: 2,
            q: 3,
            kernel: Kernel::Tricube,
            rule_of_thumb: RuleOfThumb::default(),
            derivative_rule: DerivativeRule::default(),
            process_gram: Gram::default(),
            tau_grid: default_reporting_grid(),
            integration_grid: default_integration_grid(),
            y_grid: YGrid::AtQuantiles,
            reps: DEFAULT_REPS,
            level: 0.05,
            seed: 0,
            overrides: BandwidthOverrides::default(),
        }
    }
}

fn check_open_grid(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(RkdError::InvalidInput(format!("{name} is empty")));
    }
    if g.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(RkdError::InvalidInput(format!("{name} must lie inside (0, 1)")));
    }
    if g.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RkdError::InvalidInput(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.bandwidth_options().validate()?;
        check_open_grid("tau grid", &self.tau_grid)?;
        check_open_grid("integration grid", &self.integration_grid)?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RkdError::InvalidInput(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.reps == 1 {
            return Err(RkdError::InvalidInput("inference needs at least 2 draws".into()));
        }
        if let YGrid::Values(v) = &self.y_grid {
            if v.is_empty() || v.iter().any(|y| !y.is_finite()) {
                return Err(RkdError::InvalidInput("outcome grid must be nonempty and finite".into()));
            }
        }
        for h in [self.overrides.mean, self.overrides.distributional, self.overrides.quantile, self.overrides.lorenz]
            .into_iter()
            .flatten()
        {
            if !(h > 0.0 && h.is_finite()) {
                return Err(RkdError::InvalidInput(format!("bandwidth override {h} must be positive")));
            }
        }
        Ok(())
    }

    pub fn bandwidth_options(&self) -> BandwidthOptions {
        BandwidthOptions {
            p: self.p,
            q: self.q,
            kernel: self.kernel,
            rule_of_thumb: self.rule_of_thumb,
            derivative_rule: self.derivative_rule,
        }
    }
}

/// What the plug-in selector chose for one effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub grid: Vec<f64>,
    pub pilot: Vec<f64>,
    pub main: Vec<f64>,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    /// The single bandwidth used by every component (Lorenz only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl Selection {
    fn from_schedule(s: &BandwidthSchedule) -> Self {
        Selection {
            grid: s.grid.clone(),
            pilot: s.pilot.clone(),
            main: s.main.clone(),
            bias: s.components.iter().map(|c| c.bias).collect(),
            variance: s.components.iter().map(|c| c.variance).collect(),
            baseline: None,
            warnings: s.components.iter().flat_map(|c| c.warnings.iter().cloned()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub curve: EffectCurve,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub significance: Option<TestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homogeneity: Option<TestResult>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub ensemble: Option<BootstrapEnsemble>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub n: usize,
    pub fx: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityContext>,
    pub effects: Vec<EffectReport>,
}

impl Analysis {
    pub fn effect(&self, kind: EffectKind) -> Option<&EffectReport> {
        self.effects.iter().find(|e| e.curve.kind == kind)
    }
}

/// Lazily computed pieces shared between effects.
struct Shared<'a> {
    sample: &'a Sample,
    x0: f64,
    cfg: &'a AnalysisConfig,
    opts: BandwidthOptions,
    density: Option<DensityContext>,
    mean_schedule: Option<BandwidthSchedule>,
    tau_schedule: Option<BandwidthSchedule>,
    quantile_curve: Option<EffectCurve>,
}

impl Shared<'_> {
    fn density(&mut self) -> Result<DensityContext> {
        if let Some(d) = self.density {
            return Ok(d);
        }
        let d = DensityContext::new(self.sample, self.x0, self.cfg.kernel, self.cfg.rule_of_thumb)?;
        self.density = Some(d);
        Ok(d)
    }

    fn mean_schedule(&mut self) -> Result<BandwidthSchedule> {
        if self.mean_schedule.is_none() {
            self.mean_schedule = Some(algorithm1_bandwidths(
                self.sample,
                self.x0,
                &[self.x0],
                Transform::Identity,
                &self.opts,
            )?);
        }
        Ok(self.mean_schedule.clone().unwrap())
    }

    fn tau_schedule(&mut self) -> Result<BandwidthSchedule> {
        if self.tau_schedule.is_none() {
            let d = self.density()?;
            self.tau_schedule = Some(quantile_schedule(self.sample, self.x0, &self.cfg.tau_grid, &self.opts, &d)?);
        }
        Ok(self.tau_schedule.clone().unwrap())
    }
}

fn contains_all(outer: &[f64], inner: &[f64]) -> bool {
    inner.iter().all(|t| outer.iter().any(|u| (u - t).abs() < 1e-9))
}

/// Selects bandwidths, estimates each requested effect and, when
/// `cfg.reps > 0`, simulates its limiting process for tests and bands.
pub fn analyze(sample: &Sample, design: &KinkDesign, effects: &[EffectKind], cfg: &AnalysisConfig) -> Result<Analysis> {
    cfg.validate()?;
    design.validate()?;
    if effects.is_empty() {
        return Err(RkdError::InvalidInput("no effects requested".into()));
    }
    let x0 = design.x0;
    let (fx, _) = fx_hat(&sample.x, x0, cfg.kernel)?;
    let mut sh = Shared {
        sample,
        x0,
        cfg,
        opts: cfg.bandwidth_options(),
        density: None,
        mean_schedule: None,
        tau_schedule: None,
        quantile_curve: None,
    };
    let (p, kernel) = (cfg.p, cfg.kernel);
    let wants = |k| effects.contains(&k);

    // Lorenz selection first: its quantile pieces on the integration grid
    // also serve the quantile effect when the reporting grid is a subset.
    let mut lorenz_sel = None;
    if wants(EffectKind::Lorenz) && cfg.overrides.lorenz.is_none() {
        let d = sh.density()?;
        let fine = quantile_schedule(sample, x0, &cfg.integration_grid, &sh.opts, &d)?;
        if contains_all(&cfg.integration_grid, &cfg.tau_grid) {
            sh.tau_schedule = Some(fine.subset(&cfg.tau_grid)?);
        }
        let mean = sh.mean_schedule()?;
        lorenz_sel = Some(lorenz_from_pieces(fine, mean, &cfg.tau_grid)?);
    }

    if wants(EffectKind::Quantile) || (wants(EffectKind::Distributional) && cfg.y_grid == YGrid::AtQuantiles) {
        let hs = match cfg.overrides.quantile {
            Some(h) => Bandwidths::Shared(h),
            None => Bandwidths::PerPoint(sh.tau_schedule()?.main),
        };
        sh.quantile_curve = Some(rkd_quantile(sample, design, &cfg.tau_grid, p, &hs, kernel)?);
    }

    let setup = ProcessSetup::new(design, fx, kernel, p)?.with_gram(cfg.process_gram);
    let mut reports = Vec::new();
    for &kind in effects {
        let mut selection = None;
        let mut curve = match kind {
            EffectKind::Mean => {
                let h = match cfg.overrides.mean {
                    Some(h) => h,
                    None => {
                        let s = sh.mean_schedule()?;
                        selection = Some(Selection::from_schedule(&s));
                        s.main[0]
                    }
                };
                rkd_mean(sample, design, p, h, kernel)?
            }
            EffectKind::Quantile => {
                if cfg.overrides.quantile.is_none() {
                    selection = Some(Selection::from_schedule(&sh.tau_schedule()?));
                }
                sh.quantile_curve.clone().unwrap()
            }
            EffectKind::Distributional => {
                let ys = match &cfg.y_grid {
                    YGrid::AtQuantiles => sh.quantile_curve.as_ref().unwrap().baseline.y_tau.clone().unwrap(),
                    YGrid::Values(v) => v.clone(),
                };
                let hs = match cfg.overrides.distributional {
                    Some(h) => Bandwidths::Shared(h),
                    None => {
                        let s = algorithm1_bandwidths(sample, x0, &ys, Transform::Indicator, &sh.opts)?;
                        selection = Some(Selection::from_schedule(&s));
                        Bandwidths::PerPoint(s.main)
                    }
                };
                match &cfg.y_grid {
                    YGrid::AtQuantiles => {
                        ldte_at_quantiles(sample, design, sh.quantile_curve.as_ref().unwrap(), p, &hs, kernel)?
                    }
                    YGrid::Values(v) => rkd_distributional(sample, design, v, p, &hs, kernel)?,
                }
            }
            EffectKind::Lorenz => {
                let h = match (&lorenz_sel, cfg.overrides.lorenz) {
                    (_, Some(h)) => h,
                    (Some(l), None) => {
                        let mut s = Selection::from_schedule(&l.reporting);
                        s.baseline = Some(l.baseline());
                        s.warnings.extend(l.fine.components.iter().flat_map(|c| c.warnings.iter().cloned()));
                        s.warnings.extend(l.mean.components[0].warnings.iter().cloned());
                        selection = Some(s);
                        l.baseline()
                    }
                    (None, None) => unreachable!("Lorenz selection runs whenever no override is set"),
                };
                rkd_lorenz(
                    sample,
                    design,
                    &cfg.tau_grid,
                    &cfg.integration_grid,
                    p,
                    &LorenzBandwidths::shared(h),
                    kernel,
                )?
            }
        };
        if let Some(s) = selection.as_mut() {
            s.warnings.sort();
            s.warnings.dedup();
        }

        let mut report = EffectReport {
            curve: curve.clone(),
            selection,
            critical_value: None,
            significance: None,
            homogeneity: None,
            warnings: Vec::new(),
            ensemble: None,
        };
        if cfg.reps > 0 {
            let ens = simulate_process(&mut sh, &setup, &curve, cfg)?;
            curve.se = Some(pointwise_se(&ens)?);
            report.critical_value = Some(uniform_band(&mut curve, &ens, cfg.level)?);
            report.significance = Some(significance_test(&curve, &ens, cfg.level)?);
            if curve.grid.len() > 1 {
                report.homogeneity = Some(homogeneity_test(&curve, &ens, cfg.level)?);
            }
            report.warnings = ens.warnings.clone();
            report.curve = curve;
            report.ensemble = Some(ens);
        }
        reports.push(report);
    }
    Ok(Analysis {
        n: sample.len(),
        fx,
        density: sh.density,
        effects: reports,
    })
}

fn conditional_densities(sh: &mut Shared, ys: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    let d = sh.density()?;
    ys.iter()
        .zip(levels)
        .map(|(&y, &t)| {
            let f = d.fyx(sh.sample, sh.x0, sh.cfg.kernel, y)?;
            if f > 0.0 {
                Ok(f)
            } else {
                Err(RkdError::PivotalDensity { tau: t, density: f })
            }
        })
        .collect()
}

fn simulate_process(
    sh: &mut Shared,
    setup: &ProcessSetup,
    curve: &EffectCurve,
    cfg: &AnalysisConfig,
) -> Result<BootstrapEnsemble> {
    let (sample, reps, seed) = (sh.sample, cfg.reps, cfg.seed);
    match curve.kind {
        EffectKind::Mean | EffectKind::Distributional => multiplier_for_curve(sample, setup, curve, reps, seed),
        EffectKind::Quantile => {
            let fyx = conditional_densities(sh, curve.baseline.y_tau.as_ref().unwrap(), &curve.grid)?;
            pivotal_draws(&sample.x, setup, &curve.grid, &curve.bandwidths, &fyx, reps, seed)
        }
        EffectKind::Lorenz => {
            let mean_fit = &curve.fits[0];
            let point = ProcessPoint {
                h: mean_fit.h,
                residuals: residuals(mean_fit, &sample.y, &sample.x)?,
            };
            let mean = multiplier_draws(&sample.x, setup, &[sh.x0], &[point], reps, seed)?;
            let u = curve.baseline.fine_grid.as_ref().unwrap();
            let fyx = conditional_densities(sh, curve.baseline.fine_quantiles.as_ref().unwrap(), u)?;
            let hs: Vec<f64> = curve.fits[1..].iter().map(|f| f.h).collect();
            let quant = pivotal_draws(&sample.x, setup, u, &hs, &fyx, reps, seed)?;
            lorenz_composite_draws(
                &mean,
                &quant,
                curve.baseline.mu0.unwrap(),
                curve.baseline.lorenz.as_ref().unwrap(),
                &curve.grid,
                &curve.bandwidths,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate_dgp, DgpConfig};

    fn small_cfg() -> AnalysisConfig {
        AnalysisConfig {
            reps: 200,
            tau_grid: vec![0.25, 0.5, 0.75],
            integration_grid: (1..=19).map(|i| i as f64 / 20.0).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn full_analysis_runs_and_is_consistent() {
        let cfg_d = DgpConfig { n: 1500, seed: 3, ..Default::default() };
        let s = generate_dgp(&cfg_d).unwrap();
        let a = analyze(&s, &cfg_d.design(), &EffectKind::ALL, &small_cfg()).unwrap();
        assert_eq!(a.effects.len(), 4);
        for e in &a.effects {
            let c = &e.curve;
            let (lo, hi) = (c.band_lo.as_ref().unwrap(), c.band_hi.as_ref().unwrap());
            for j in 0..c.grid.len() {
                assert!(lo[j] <= c.estimates[j] && c.estimates[j] <= hi[j]);
            }
            let t = e.significance.unwrap();
            assert!((0.0..=1.0).contains(&t.p_value));
            assert_eq!(t.reject, t.statistic > t.critical_value);
            assert!(e.selection.is_some());
        }
        let l = a.effect(EffectKind::Lorenz).unwrap();
        let hl = l.selection.as_ref().unwrap().baseline.unwrap();
        assert!(l.curve.bandwidths.iter().all(|h| *h == hl));
        assert!(a.effect(EffectKind::Mean).unwrap().homogeneity.is_none());
        // same seed, same numbers
        let b = analyze(&s, &cfg_d.design(), &EffectKind::ALL, &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_skip_selection_and_zero_reps_skip_inference() {
        let cfg_d = DgpConfig { n: 800, seed: 4, ..Default::default() };
        let s = generate_dgp(&cfg_d).unwrap();
        let cfg = AnalysisConfig {
            reps: 0,
            overrides: BandwidthOverrides::all(0.2),
            ..small_cfg()
        };
        let a = analyze(&s, &cfg_d.design(), &[EffectKind::Mean, EffectKind::Quantile], &cfg).unwrap();
        for e in &a.effects {
            assert!(e.selection.is_none() && e.significance.is_none() && e.curve.band_lo.is_none());
            assert!(e.curve.bandwidths.iter().all(|h| *h == 0.2));
        }
        assert!(a.density.is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = generate_dgp(&DgpConfig { n: 200, ..Default::default() }).unwrap();
        let d = DgpConfig::default().design();
        let bad = [
            AnalysisConfig { level: 1.0, ..small_cfg() },
            AnalysisConfig { tau_grid: vec![0.5, 0.4], ..small_cfg() },
            AnalysisConfig { tau_grid: vec![0.0, 0.5], ..small_cfg() },
            AnalysisConfig { q: 2, ..small_cfg() },
            AnalysisConfig { overrides: BandwidthOverrides::all(-1.0), ..small_cfg() },
        ];
        for c in bad {
            assert!(matches!(analyze(&s, &d, &[EffectKind::Mean], &c), Err(RkdError::InvalidInput(_))));
        }
        assert!(analyze(&s, &d, &[], &small_cfg()).is_err());
    }
}
