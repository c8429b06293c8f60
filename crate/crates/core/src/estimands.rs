//! Local treatment effects at the kink, assembled from constrained fits.
//!
//! Every Wald-type effect is the right-minus-left first-derivative gap of a
//! constrained fit divided by the kink gap of the treatment rule. The Lorenz
//! effect composes the integrated quantile effect with the mean effect.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::kernel::Kernel;
use crate::regression::{
    rearrange_monotone, ConstrainedFit, DesignBlock, LsFactor, QuantileProblem, Sample, Window,
};

/// Location of the kink and one-sided slopes of the treatment rule there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinkDesign {
    pub x0: f64,
    pub slope_left: f64,
    pub slope_right: f64,
}

impl KinkDesign {
    pub fn new(x0: f64, slope_left: f64, slope_right: f64) -> Result<Self> {
        let d = KinkDesign {
            x0,
            slope_left,
            slope_right,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0.is_finite() && self.slope_left.is_finite() && self.slope_right.is_finite()) {
            return Err(RkdError::InvalidInput("kink design entries must be finite".into()));
        }
        let gap = self.gap();
        if gap.abs() <= 1e-12 {
            return Err(RkdError::DegenerateKink { gap });
        }
        Ok(())
    }

    pub fn gap(&self) -> f64 {
        self.slope_right - self.slope_left
    }

    /// The same kink with the one-sided slopes exchanged.
    pub fn swapped(&self) -> Self {
        KinkDesign {
            x0: self.x0,
            slope_left: self.slope_right,
            slope_right: self.slope_left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Mean,
    Distributional,
    Quantile,
    Lorenz,
}

impl EffectKind {
    pub const ALL: [EffectKind; 4] = [
        EffectKind::Mean,
        EffectKind::Distributional,
        EffectKind::Quantile,
        EffectKind::Lorenz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EffectKind::Mean => "mean",
            EffectKind::Distributional => "distributional",
            EffectKind::Quantile => "quantile",
            EffectKind::Lorenz => "lorenz",
        }
    }
}

impl std::str::FromStr for EffectKind {
    type Err = RkdError;

    fn from_str(s: &str) -> Result<Self> {
        EffectKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| RkdError::InvalidInput(format!("unknown effect '{s}'")))
    }
}

/// Auxiliary baseline quantities at the kink.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Fitted conditional mean at the kink.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    /// Quantile levels behind a grid of estimated quantiles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    /// Rearranged fitted conditional quantiles at the grid levels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_tau: Option<Vec<f64>>,
    /// Estimated conditional Lorenz curve at the grid levels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lorenz: Option<Vec<f64>>,
    /// Integration grid and the rearranged quantiles on it (Lorenz only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_quantiles: Option<Vec<f64>>,
    /// Mean-effect estimate used in the Lorenz composition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_effect: Option<f64>,
}

/// Point estimates of one effect over its grid, with optional inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub kind: EffectKind,
    pub grid: Vec<f64>,
    pub estimates: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub baseline: Baseline,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_hi: Option<Vec<f64>>,
    /// Underlying fits, aligned with `grid` (or with the integration grid for
    /// Lorenz curves, preceded by the mean fit).
    #[serde(skip)]
    pub fits: Vec<ConstrainedFit>,
}

impl EffectCurve {
    fn new(kind: EffectKind, grid: Vec<f64>, estimates: Vec<f64>, bandwidths: Vec<f64>) -> Self {
        EffectCurve {
            kind,
            grid,
            estimates,
            bandwidths,
            baseline: Baseline::default(),
            se: None,
            band_lo: None,
            band_hi: None,
            fits: Vec::new(),
        }
    }
}

/// Bandwidth specification for a grid of fits.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidths {
    Shared(f64),
    PerPoint(Vec<f64>),
}

impl Bandwidths {
    pub fn resolve(&self, len: usize) -> Result<Vec<f64>> {
        let v = match self {
            Bandwidths::Shared(h) => vec![*h; len],
            Bandwidths::PerPoint(v) => {
                if v.len() != len {
                    return Err(RkdError::LengthMismatch {
                        expected: len,
                        got: v.len(),
                    });
                }
                v.clone()
            }
        };
        if let Some(h) = v.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(RkdError::InvalidInput(format!("bandwidths must be positive, got {h}")));
        }
        Ok(v)
    }
}

fn check_levels(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(RkdError::InvalidInput("empty quantile grid".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(RkdError::InvalidInput(format!("quantile level {t} is outside (0, 1)")));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RkdError::InvalidInput("quantile grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Mean effect: derivative gap of the local fit of `Y`, over the kink gap.
pub fn rkd_mean(sample: &Sample, design: &KinkDesign, p: usize, h: f64, kernel: Kernel) -> Result<EffectCurve> {
    design.validate()?;
    let fit = crate::regression::fit_constrained_wls(&sample.y, &sample.x, design.x0, p, h, kernel)?;
    let mut c = EffectCurve::new(
        EffectKind::Mean,
        vec![design.x0],
        vec![fit.slope_gap() / design.gap()],
        vec![h],
    );
    c.baseline.mu0 = Some(fit.level());
    c.fits.push(fit);
    Ok(c)
}

/// Indicator transform `1{Y ≤ y}`.
pub fn indicator(y: &[f64], at: f64) -> Vec<f64> {
    y.iter().map(|&v| if v <= at { 1.0 } else { 0.0 }).collect()
}

/// Distributional effect at each outcome value of `y_grid`.
pub fn rkd_distributional(
    sample: &Sample,
    design: &KinkDesign,
    y_grid: &[f64],
    p: usize,
    bandwidths: &Bandwidths,
    kernel: Kernel,
) -> Result<EffectCurve> {
    design.validate()?;
    let hs = bandwidths.resolve(y_grid.len())?;
    let mut shared: Option<(f64, LsFactor)> = None;
    let mut fits = Vec::with_capacity(y_grid.len());
    for (&yv, &h) in y_grid.iter().zip(&hs) {
        let reuse = matches!(&shared, Some((hh, _)) if *hh == h);
        if !reuse {
            let block = DesignBlock::build(&sample.x, design.x0, p, Window::Kernel { kernel, h })
                .map_err(|e| e.at(yv))?;
            shared = Some((h, LsFactor::new(block).map_err(|e| e.at(yv))?));
        }
        let factor = &shared.as_ref().unwrap().1;
        fits.push(factor.solve(&indicator(&sample.y, yv)));
    }
    let est = fits.iter().map(|f| f.slope_gap() / design.gap()).collect();
    let mut c = EffectCurve::new(EffectKind::Distributional, y_grid.to_vec(), est, hs);
    c.fits = fits;
    Ok(c)
}

/// Quantile fits over an increasing grid of levels. Fits that share a
/// bandwidth share one design and are warm-started from the previous level.
pub(crate) fn quantile_fits(
    sample: &Sample,
    x0: f64,
    taus: &[f64],
    p: usize,
    hs: &[f64],
    kernel: Kernel,
) -> Result<Vec<ConstrainedFit>> {
    let mut fits = Vec::with_capacity(taus.len());
    let mut current: Option<(f64, QuantileProblem, Option<crate::regression::QuantileSolution>)> = None;
    for (&tau, &h) in taus.iter().zip(hs) {
        let reuse = matches!(&current, Some((hh, _, _)) if *hh == h);
        if !reuse {
            let block = DesignBlock::build(&sample.x, x0, p, Window::Kernel { kernel, h })
                .map_err(|e| e.at(tau))?;
            current = Some((h, QuantileProblem::new(&sample.y, block), None));
        }
        let (_, prob, warm) = current.as_mut().unwrap();
        let (fit, sol) = prob.solve(tau, warm.as_ref()).map_err(|e| e.at(tau))?;
        *warm = Some(sol);
        fits.push(fit);
    }
    Ok(fits)
}

/// Quantile effect at each level of `tau_grid`; the baseline carries the
/// rearranged fitted quantiles.
pub fn rkd_quantile(
    sample: &Sample,
    design: &KinkDesign,
    tau_grid: &[f64],
    p: usize,
    bandwidths: &Bandwidths,
    kernel: Kernel,
) -> Result<EffectCurve> {
    design.validate()?;
    check_levels(tau_grid)?;
    let hs = bandwidths.resolve(tau_grid.len())?;
    let fits = quantile_fits(sample, design.x0, tau_grid, p, &hs, kernel)?;
    let est = fits.iter().map(|f| f.slope_gap() / design.gap()).collect();
    let levels: Vec<f64> = fits.iter().map(|f| f.level()).collect();
    let mut c = EffectCurve::new(EffectKind::Quantile, tau_grid.to_vec(), est, hs);
    c.baseline.levels = Some(tau_grid.to_vec());
    c.baseline.y_tau = Some(rearrange_monotone(tau_grid, &levels)?);
    c.fits = fits;
    Ok(c)
}

/// Distributional effect evaluated at the estimated quantiles of a quantile
/// curve.
pub fn ldte_at_quantiles(
    sample: &Sample,
    design: &KinkDesign,
    quantile_curve: &EffectCurve,
    p: usize,
    bandwidths: &Bandwidths,
    kernel: Kernel,
) -> Result<EffectCurve> {
    let y_tau = quantile_curve
        .baseline
        .y_tau
        .as_ref()
        .ok_or_else(|| RkdError::InvalidInput("quantile curve carries no fitted quantiles".into()))?;
    let mut c = rkd_distributional(sample, design, y_tau, p, bandwidths, kernel)?;
    c.baseline.levels = quantile_curve.baseline.levels.clone();
    c.baseline.y_tau = Some(y_tau.clone());
    Ok(c)
}

/// `∫_0^t v(u) du` for values tabulated on an increasing grid inside (0, 1):
/// a rectangle at the first value up to `grid[0]`, trapezoids after, and a
/// linearly interpolated partial panel at the end.
pub fn integral_to(grid: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= grid[0] {
        return t.max(0.0) * values[0];
    }
    let mut acc = grid[0] * values[0];
    for j in 1..grid.len() {
        if t >= grid[j] {
            acc += 0.5 * (grid[j] - grid[j - 1]) * (values[j] + values[j - 1]);
        } else {
            let frac = (t - grid[j - 1]) / (grid[j] - grid[j - 1]);
            let vt = values[j - 1] + frac * (values[j] - values[j - 1]);
            acc += 0.5 * (t - grid[j - 1]) * (values[j - 1] + vt);
            return acc;
        }
    }
    acc
}

/// Bandwidths behind a Lorenz estimate: one for the mean piece and one per
/// level of the integration grid for the quantile piece.
#[derive(Debug, Clone, PartialEq)]
pub struct LorenzBandwidths {
    pub mean: f64,
    pub quantile: Bandwidths,
    /// Bandwidth reported against each point of the output grid.
    pub reported: Bandwidths,
}

impl LorenzBandwidths {
    pub fn shared(h: f64) -> Self {
        LorenzBandwidths {
            mean: h,
            quantile: Bandwidths::Shared(h),
            reported: Bandwidths::Shared(h),
        }
    }
}

/// Lorenz effect `(1/μ0)(∫_0^τ Δ_Q − L(τ)·Δ_μ)` at each level of `tau_grid`,
/// with integrals over `integration_grid`.
pub fn rkd_lorenz(
    sample: &Sample,
    design: &KinkDesign,
    tau_grid: &[f64],
    integration_grid: &[f64],
    p: usize,
    bandwidths: &LorenzBandwidths,
    kernel: Kernel,
) -> Result<EffectCurve> {
    design.validate()?;
    check_levels(tau_grid)?;
    check_levels(integration_grid)?;
    let mean = rkd_mean(sample, design, p, bandwidths.mean, kernel)?;
    let mu0 = mean.baseline.mu0.unwrap();
    if !(mu0 > 0.0) {
        return Err(RkdError::NonpositiveMean { mu0 });
    }
    let delta_mu = mean.estimates[0];
    let hs = bandwidths.quantile.resolve(integration_grid.len())?;
    let fits = quantile_fits(sample, design.x0, integration_grid, p, &hs, kernel)?;
    let dq: Vec<f64> = fits.iter().map(|f| f.slope_gap() / design.gap()).collect();
    let levels: Vec<f64> = fits.iter().map(|f| f.level()).collect();
    let y_u = rearrange_monotone(integration_grid, &levels)?;

    let mut est = Vec::with_capacity(tau_grid.len());
    let mut lorenz = Vec::with_capacity(tau_grid.len());
    let mut y_tau = Vec::with_capacity(tau_grid.len());
    for &t in tau_grid {
        let l = integral_to(integration_grid, &y_u, t) / mu0;
        let iq = integral_to(integration_grid, &dq, t);
        est.push((iq - l * delta_mu) / mu0);
        lorenz.push(l);
        y_tau.push(interpolate(integration_grid, &y_u, t));
    }
    let reported = bandwidths.reported.resolve(tau_grid.len())?;
    let mut c = EffectCurve::new(EffectKind::Lorenz, tau_grid.to_vec(), est, reported);
    c.baseline = Baseline {
        mu0: Some(mu0),
        levels: Some(tau_grid.to_vec()),
        y_tau: Some(y_tau),
        lorenz: Some(lorenz),
        fine_grid: Some(integration_grid.to_vec()),
        fine_quantiles: Some(y_u),
        mean_effect: Some(delta_mu),
    };
    c.fits = std::iter::once(mean.fits[0].clone()).chain(fits).collect();
    Ok(c)
}

/// Piecewise-linear interpolation, constant beyond the ends.
pub fn interpolate(grid: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= grid[0] {
        return values[0];
    }
    for j in 1..grid.len() {
        if t <= grid[j] {
            let frac = (t - grid[j - 1]) / (grid[j] - grid[j - 1]);
            return values[j - 1] + frac * (values[j] - values[j - 1]);
        }
    }
    values[values.len() - 1]
}

/// `{0.1, 0.2, …, 0.9}`.
pub fn default_reporting_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// `{0.01, 0.02, …, 0.99}`.
pub fn default_integration_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_x(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn noisy(n: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_x(n, seed + 1);
        let y = x
            .iter()
            .map(|&v| 2.0 + v.abs() + 0.3 * v + rng.random_range(-0.4..0.4))
            .collect();
        Sample::new(y, x).unwrap()
    }

    #[test]
    fn kink_design_validation() {
        assert!(KinkDesign::new(0.0, 1.0, 1.0).is_err());
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        assert_eq!(d.gap(), 2.0);
        assert_eq!(d.swapped().gap(), -2.0);
    }

    #[test]
    fn noiseless_mean_and_quantile() {
        let x = uniform_x(300, 1);
        let y: Vec<f64> = x.iter().map(|&v| 1.0 + if v >= 0.0 { v } else { 0.0 }).collect();
        let s = Sample::new(y, x).unwrap();
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let m = rkd_mean(&s, &d, 2, 0.8, Kernel::Tricube).unwrap();
        assert!((m.estimates[0] - 0.5).abs() < 1e-10);
        assert!((m.baseline.mu0.unwrap() - 1.0).abs() < 1e-10);
        let q = rkd_quantile(&s, &d, &[0.2, 0.5, 0.8], 1, &Bandwidths::Shared(0.8), Kernel::Tricube).unwrap();
        assert!(q.estimates.iter().all(|e| (e - 0.5).abs() < 1e-8), "{:?}", q.estimates);
    }

    #[test]
    fn constant_outcome_gives_zero_effects() {
        let x = uniform_x(200, 2);
        let s = Sample::new(vec![3.0; 200], x).unwrap();
        let d = KinkDesign::new(0.0, 0.0, 1.0).unwrap();
        assert!(rkd_mean(&s, &d, 2, 0.7, Kernel::Tricube).unwrap().estimates[0].abs() < 1e-10);
        let dist = rkd_distributional(&s, &d, &[2.0, 4.0], 2, &Bandwidths::Shared(0.7), Kernel::Tricube).unwrap();
        assert!(dist.estimates.iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn distributional_outside_support_is_zero() {
        let s = noisy(300, 3);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let c = rkd_distributional(&s, &d, &[-100.0, 100.0], 2, &Bandwidths::PerPoint(vec![0.6, 0.7]), Kernel::Tricube)
            .unwrap();
        assert!(c.estimates.iter().all(|e| e.abs() < 1e-10));
        assert_eq!(c.bandwidths, vec![0.6, 0.7]);
    }

    #[test]
    fn ldte_grid_is_fitted_quantiles() {
        let s = noisy(400, 4);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let q = rkd_quantile(&s, &d, &[0.25, 0.5, 0.75], 2, &Bandwidths::Shared(0.8), Kernel::Tricube).unwrap();
        let l = ldte_at_quantiles(&s, &d, &q, 2, &Bandwidths::Shared(0.8), Kernel::Tricube).unwrap();
        assert_eq!(&l.grid, q.baseline.y_tau.as_ref().unwrap());
        assert!(l.grid.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn slope_swap_negates() {
        let s = noisy(400, 5);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let e = d.swapped();
        let bw = Bandwidths::Shared(0.7);
        let a = rkd_mean(&s, &d, 2, 0.7, Kernel::Tricube).unwrap();
        let b = rkd_mean(&s, &e, 2, 0.7, Kernel::Tricube).unwrap();
        assert_eq!(a.estimates[0], -b.estimates[0]);
        let a = rkd_quantile(&s, &d, &[0.3, 0.6], 2, &bw, Kernel::Tricube).unwrap();
        let b = rkd_quantile(&s, &e, &[0.3, 0.6], 2, &bw, Kernel::Tricube).unwrap();
        for (u, v) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(*u, -*v);
        }
    }

    #[test]
    fn lorenz_matches_transcription() {
        let s = noisy(600, 6);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let u = default_integration_grid();
        let t = [0.005, 0.3, 0.55];
        let c = rkd_lorenz(&s, &d, &t, &u, 2, &LorenzBandwidths::shared(0.8), Kernel::Tricube).unwrap();
        let mean = rkd_mean(&s, &d, 2, 0.8, Kernel::Tricube).unwrap();
        let q = rkd_quantile(&s, &d, &u, 2, &Bandwidths::Shared(0.8), Kernel::Tricube).unwrap();
        let mu0 = mean.baseline.mu0.unwrap();
        let yq = q.baseline.y_tau.unwrap();
        // τ = 0.3 lies on the grid: plain trapezoid sums from the first node.
        let j = 29;
        let trap = |v: &[f64]| u[0] * v[0] + (1..=j).map(|i| 0.01 * 0.5 * (v[i] + v[i - 1])).sum::<f64>();
        let l = trap(&yq) / mu0;
        let expect = (trap(&q.estimates) - l * mean.estimates[0]) / mu0;
        assert!((c.estimates[1] - expect).abs() < 1e-12);
        // below the first node both integrals are rectangles that vanish with τ
        let head = (0.005 * q.estimates[0] - 0.005 * yq[0] / mu0 * mean.estimates[0]) / mu0;
        assert!((c.estimates[0] - head).abs() < 1e-12);
        let lor = c.baseline.lorenz.as_ref().unwrap();
        assert!(lor.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(lor.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lorenz_rejects_nonpositive_mean() {
        let mut s = noisy(300, 7);
        s.y.iter_mut().for_each(|v| *v -= 10.0);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let err = rkd_lorenz(&s, &d, &[0.5], &default_integration_grid(), 2, &LorenzBandwidths::shared(0.8), Kernel::Tricube)
            .unwrap_err();
        assert!(matches!(err, RkdError::NonpositiveMean { .. }));
    }

    #[test]
    fn integral_helpers() {
        let g = default_integration_grid();
        let v: Vec<f64> = g.iter().map(|u| 2.0 * u).collect();
        assert!((integral_to(&g, &v, 0.5) - 0.25).abs() < 1e-3);
        assert!((integral_to(&g, &v, 0.555) - 0.555f64.powi(2)).abs() < 1e-3);
        assert_eq!(integral_to(&g, &v, 0.0), 0.0);
        assert!((interpolate(&g, &v, 0.555) - 1.11).abs() < 1e-12);
    }

    #[test]
    fn per_point_errors_name_the_point() {
        let s = noisy(200, 8);
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let err = rkd_quantile(&s, &d, &[0.3, 0.6], 2, &Bandwidths::PerPoint(vec![0.8, 1e-4]), Kernel::Tricube)
            .unwrap_err();
        match err {
            RkdError::AtPoint { point, source } => {
                assert_eq!(point, 0.6);
                assert!(matches!(*source, RkdError::Identification { .. }));
            }
            other => panic!("{other:?}"),
        }
    }
}
