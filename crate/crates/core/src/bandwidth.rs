//! Plug-in MSE-optimal bandwidths.
//!
//! Each selector runs in two stages. A pilot bandwidth comes from global
//! (unweighted) fits of order `q + 1`; the main bandwidth then uses local
//! fits of order `p + 1` at the pilot bandwidth to estimate the leading bias
//! and variance constants of the order-`p` derivative-gap estimator.

use serde::{Deserialize, Serialize};

use crate::density::{self, RuleOfThumb};
use crate::error::{Result, RkdError};
use crate::estimands::{indicator, integral_to, interpolate};
use crate::kernel::{Kernel, KernelConstants};
use crate::regression::{
    factorial, fit_constrained_wls, rearrange_monotone, ConstrainedFit, DesignBlock, LsFactor,
    QuantileProblem, QuantileSolution, Sample, Window,
};

const FLOOR: f64 = 1e-12;

/// How a fitted coefficient on `u^k` becomes the `k`-th derivative fed into
/// the bias constant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeRule {
    /// `coef / k!`, as the selectors are usually stated. The bias constant
    /// then carries `1/k!` twice.
    #[default]
    Displayed,
    /// `coef · k!`, the Taylor-coefficient identity.
    Taylor,
}

impl DerivativeRule {
    pub fn derivative(self, coef: f64, k: usize) -> f64 {
        match self {
            DerivativeRule::Displayed => coef / factorial(k),
            DerivativeRule::Taylor => coef * factorial(k),
        }
    }
}

/// Orders, kernel and density constants shared by all selectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthOptions {
    pub p: usize,
    pub q: usize,
    pub kernel: Kernel,
    pub rule_of_thumb: RuleOfThumb,
    pub derivative_rule: DerivativeRule,
}

impl Default for BandwidthOptions {
    fn default() -> Self {
        BandwidthOptions {
            p: 2,
            q: 3,
            kernel: Kernel::Tricube,
            rule_of_thumb: RuleOfThumb::default(),
            derivative_rule: DerivativeRule::default(),
        }
    }
}

impl BandwidthOptions {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q <= self.p {
            return Err(RkdError::InvalidInput(format!(
                "bandwidth selection needs 1 <= p < q, got p = {}, q = {}",
                self.p, self.q
            )));
        }
        Ok(())
    }
}

/// Per-point ingredients of a selected bandwidth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointComponents {
    pub pilot_bias: f64,
    pub pilot_variance: f64,
    pub bias: f64,
    pub variance: f64,
    /// `(q+1)`-th right and left derivatives from the global fit.
    pub pilot_derivatives: [f64; 2],
    /// `(p+1)`-th right and left derivatives from the local pilot fit.
    pub derivatives: [f64; 2],
    /// Right and left conditional error variances, pilot stage then main stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_sigma: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 2]>,
    pub fx: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_fyx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fyx: Option<f64>,
    /// Fitted level of the local pilot fit (the mean or the quantile at x0).
    pub level: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Selected pilot and main bandwidths over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub grid: Vec<f64>,
    pub pilot: Vec<f64>,
    pub main: Vec<f64>,
    pub components: Vec<PointComponents>,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub bounds: (f64, f64),
}

impl BandwidthSchedule {
    /// Main bandwidth recomputed from the stored constants, before clamping.
    pub fn unclamped_main(&self, i: usize) -> f64 {
        let c = &self.components[i];
        optimal_bandwidth(1, self.p, c.bias, c.variance, self.n)
    }

    /// Entries at the requested grid points, which must be present.
    pub fn subset(&self, grid: &[f64]) -> Result<BandwidthSchedule> {
        let idx: Vec<usize> = grid
            .iter()
            .map(|g| {
                self.grid
                    .iter()
                    .position(|v| (v - g).abs() < 1e-9)
                    .ok_or_else(|| RkdError::InvalidInput(format!("grid point {g} is not in the schedule")))
            })
            .collect::<Result<_>>()?;
        Ok(BandwidthSchedule {
            grid: idx.iter().map(|&i| self.grid[i]).collect(),
            pilot: idx.iter().map(|&i| self.pilot[i]).collect(),
            main: idx.iter().map(|&i| self.main[i]).collect(),
            components: idx.iter().map(|&i| self.components[i].clone()).collect(),
            ..self.clone()
        })
    }
}

/// Bandwidth selection for the Lorenz effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzSchedule {
    /// Main bandwidths on the reporting grid, with composed constants.
    pub reporting: BandwidthSchedule,
    /// Quantile pieces on the integration grid.
    pub fine: BandwidthSchedule,
    /// Mean-effect pieces (one point).
    pub mean: BandwidthSchedule,
    pub mu0: f64,
    pub lorenz: Vec<f64>,
}

impl LorenzSchedule {
    /// One bandwidth for every component of the Lorenz estimator: the median
    /// of the per-level selections.
    pub fn baseline(&self) -> f64 {
        median(&self.reporting.main)
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `{(1+2ν)/(2(order+1−ν)) · V/B²}^{1/(2·order+3)} · n^{−1/(2·order+3)}`.
pub fn optimal_bandwidth(nu: usize, order: usize, bias: f64, variance: f64, n: usize) -> f64 {
    let c = (1.0 + 2.0 * nu as f64) / (2.0 * (order + 1 - nu) as f64);
    let e = 1.0 / (2.0 * order as f64 + 3.0);
    (c * variance / (bias * bias)).powf(e) * (n as f64).powf(-e)
}

/// Leading bias and variance constants of the `nu`-th derivative gap of an
/// order-`p` fit, where `p = consts.p`. `derivs` are the `(p+1)`-th right and
/// left derivatives and `sigma` the right and left error variances.
pub fn amse_bias_variance(
    consts: &KernelConstants,
    nu: usize,
    derivs: [f64; 2],
    sigma: [f64; 2],
    fx: f64,
) -> Result<(f64, f64)> {
    if !(fx > 0.0 && fx.is_finite()) {
        return Err(RkdError::InvalidInput(format!("density at the kink must be positive, got {fx}")));
    }
    let p = consts.p;
    let w = consts.slope_gap_weights(nu);
    let tp = consts.theta_plus(p + 1).expect("moment p+1 cached");
    let tm = consts.theta_minus(p + 1).expect("moment p+1 cached");
    let bias = w.dot(&(derivs[0] * tp + derivs[1] * tm)) / factorial(p + 1);
    let mix = sigma[0] * &consts.psi_plus + sigma[1] * &consts.psi_minus;
    let variance = w.dot(&(&mix * &w)) / fx;
    Ok((bias, variance))
}

/// Variance constant of the quantile derivative gap at level `tau`.
pub fn quantile_variance(consts: &KernelConstants, nu: usize, tau: f64, fx: f64, fyx: f64) -> f64 {
    let w = consts.slope_gap_weights(nu);
    tau * (1.0 - tau) * w.dot(&(&consts.psi_full * &w)) / (fx * fyx)
}

/// Clamp range for every selected bandwidth: from five times the median gap
/// between neighbouring observations near `x0` up to the range of `x`.
pub fn bandwidth_bounds(x: &[f64], x0: f64) -> Result<(f64, f64)> {
    let n = x.len();
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(RkdError::Degenerate("running variable has no spread".into()));
    }
    let take = (2 * (n as f64).sqrt().ceil() as usize).clamp(2, n);
    let mut near: Vec<f64> = x.to_vec();
    near.sort_by(|a, b| (a - x0).abs().total_cmp(&(b - x0).abs()));
    near.truncate(take);
    near.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = near.windows(2).map(|w| w[1] - w[0]).collect();
    let lower = (5.0 * median(&gaps)).min(range);
    Ok((lower, range))
}

fn clamp(h: f64, bounds: (f64, f64), what: &str, warnings: &mut Vec<String>) -> f64 {
    if !h.is_finite() || h > bounds.1 {
        warnings.push(format!("{what} bandwidth {h:.4e} clamped to the data range"));
        bounds.1
    } else if h < bounds.0 {
        warnings.push(format!("{what} bandwidth {h:.4e} clamped to the lower bound"));
        bounds.0
    } else {
        h
    }
}

fn checked_bandwidth(
    nu: usize,
    order: usize,
    bias: f64,
    variance: f64,
    n: usize,
    bounds: (f64, f64),
    what: &str,
    warnings: &mut Vec<String>,
) -> f64 {
    if bias * bias < FLOOR {
        warnings.push(format!("{what} bias constant is numerically zero"));
        return bounds.1;
    }
    clamp(optimal_bandwidth(nu, order, bias, variance, n), bounds, what, warnings)
}

/// Intercept at `x0` of a (weighted) linear regression of `v` on `x − x0`
/// over one side of the kink.
fn one_sided_intercept(
    v: &[f64],
    x: &[f64],
    x0: f64,
    right: bool,
    weight: impl Fn(f64) -> f64,
) -> Result<f64> {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&vi, &xi) in v.iter().zip(x) {
        if (xi >= x0) != right {
            continue;
        }
        let d = xi - x0;
        let w = weight(d);
        if w <= 0.0 {
            continue;
        }
        s0 += w;
        s1 += w * d;
        s2 += w * d * d;
        t0 += w * vi;
        t1 += w * d * vi;
    }
    let det = s0 * s2 - s1 * s1;
    if !(det > 1e-300 * s0.max(1.0)) {
        return Err(RkdError::Degenerate(format!(
            "one-sided variance regression on the {} is singular",
            if right { "right" } else { "left" }
        )));
    }
    Ok((s2 * t0 - s1 * t1) / det)
}

fn side_variances(
    resid: &[f64],
    x: &[f64],
    x0: f64,
    weight: impl Fn(f64) -> f64 + Copy,
    warnings: &mut Vec<String>,
) -> Result<[f64; 2]> {
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let mut out = [0.0; 2];
    for (slot, right) in [(0, true), (1, false)] {
        let s = one_sided_intercept(&sq, x, x0, right, weight)?;
        out[slot] = if s < FLOOR {
            warnings.push(format!(
                "{} error variance {s:.3e} floored",
                if right { "right" } else { "left" }
            ));
            FLOOR
        } else {
            s
        };
    }
    Ok(out)
}

/// Transformation of the outcome indexed by the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// `φ(Y, θ) = Y`; the grid value is ignored.
    Identity,
    /// `φ(Y, θ) = 1{Y ≤ θ}`.
    Indicator,
}

/// Density of the running variable at the kink with its rule-of-thumb
/// bandwidth.
pub fn fx_hat(x: &[f64], x0: f64, kernel: Kernel) -> Result<(f64, f64)> {
    let vn = density::rule_of_thumb_vn(x)?;
    let fx = density::kde_at(x, x0, kernel, vn)?;
    if !(fx > 0.0) {
        return Err(RkdError::Degenerate(format!("no observations within {vn:.3e} of the kink")));
    }
    Ok((fx, vn))
}

/// Plug-in bandwidths for Wald-type effects of `φ(Y, θ)` over `theta_grid`.
pub fn algorithm1_bandwidths(
    sample: &Sample,
    x0: f64,
    theta_grid: &[f64],
    transform: Transform,
    opts: &BandwidthOptions,
) -> Result<BandwidthSchedule> {
    opts.validate()?;
    let (p, q, kernel) = (opts.p, opts.q, opts.kernel);
    let n = sample.len();
    let (x, y) = (&sample.x, &sample.y);
    let bounds = bandwidth_bounds(x, x0)?;
    let (fx, _) = fx_hat(x, x0, kernel)?;
    let cq = KernelConstants::cached(kernel, q)?;
    let cp = KernelConstants::cached(kernel, p)?;
    let global = LsFactor::new(DesignBlock::build(x, x0, q + 1, Window::Global)?)?;

    let mut sched = BandwidthSchedule {
        grid: theta_grid.to_vec(),
        pilot: Vec::new(),
        main: Vec::new(),
        components: Vec::new(),
        n,
        p,
        q,
        bounds,
    };
    for &theta in theta_grid {
        let z = match transform {
            Transform::Identity => y.clone(),
            Transform::Indicator => indicator(y, theta),
        };
        let point = || -> Result<(f64, f64, PointComponents)> {
            let mut c = PointComponents { fx, ..Default::default() };
            let gfit = global.solve(&z);
            let gc = [gfit.coeffs[2 * q + 1], gfit.coeffs[2 * q + 2]];
            c.pilot_derivatives = gc.map(|v| opts.derivative_rule.derivative(v, q + 1));
            let gres = crate::regression::residuals(&gfit, &z, x)?;
            let ps = side_variances(&gres, x, x0, |_| 1.0, &mut c.warnings)?;
            c.pilot_sigma = Some(ps);
            let (pb, pv) = amse_bias_variance(&cq, p + 1, c.pilot_derivatives, ps, fx)?;
            c.pilot_bias = pb;
            c.pilot_variance = pv;
            let pilot = checked_bandwidth(p + 1, q, pb, pv, n, bounds, "pilot", &mut c.warnings);

            let lfit = fit_constrained_wls(&z, x, x0, p + 1, pilot, kernel)?;
            let lc = [lfit.coeffs[2 * p + 1], lfit.coeffs[2 * p + 2]];
            c.derivatives = lc.map(|v| opts.derivative_rule.derivative(v, p + 1));
            c.level = lfit.level();
            let lres = crate::regression::residuals(&lfit, &z, x)?;
            let s = side_variances(&lres, x, x0, |d| kernel.eval(d / pilot), &mut c.warnings)?;
            c.sigma = Some(s);
            let (b, v) = amse_bias_variance(&cp, 1, c.derivatives, s, fx)?;
            c.bias = b;
            c.variance = v;
            let main = checked_bandwidth(1, p, b, v, n, bounds, "main", &mut c.warnings);
            Ok((pilot, main, c))
        };
        let (pilot, main, c) = point().map_err(|e| e.at(theta))?;
        sched.pilot.push(pilot);
        sched.main.push(main);
        sched.components.push(c);
    }
    Ok(sched)
}

/// Conditional-density bandwidths and the running-variable density, shared
/// by the quantile selectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityContext {
    pub fx: f64,
    pub vn: f64,
    pub h1: f64,
    pub h2: f64,
}

impl DensityContext {
    pub fn new(sample: &Sample, x0: f64, kernel: Kernel, rot: RuleOfThumb) -> Result<Self> {
        let (fx, vn) = fx_hat(&sample.x, x0, kernel)?;
        let (h1, h2) = density::bashtannyk_hyndman_bandwidths(&sample.y, &sample.x, kernel, rot)?;
        Ok(DensityContext { fx, vn, h1, h2 })
    }

    pub fn fyx(&self, sample: &Sample, x0: f64, kernel: Kernel, y: f64) -> Result<f64> {
        density::conditional_density(y, x0, &sample.y, &sample.x, kernel, self.h1, self.h2)
    }
}

/// Plug-in bandwidths for the quantile effect at each level of `tau_grid`.
pub fn qrkd_bandwidths(
    sample: &Sample,
    x0: f64,
    tau_grid: &[f64],
    opts: &BandwidthOptions,
) -> Result<BandwidthSchedule> {
    opts.validate()?;
    let ctx = DensityContext::new(sample, x0, opts.kernel, opts.rule_of_thumb)?;
    quantile_schedule(sample, x0, tau_grid, opts, &ctx)
}

pub(crate) fn quantile_schedule(
    sample: &Sample,
    x0: f64,
    tau_grid: &[f64],
    opts: &BandwidthOptions,
    ctx: &DensityContext,
) -> Result<BandwidthSchedule> {
    let (p, q, kernel) = (opts.p, opts.q, opts.kernel);
    let n = sample.len();
    let (x, y) = (&sample.x, &sample.y);
    let bounds = bandwidth_bounds(x, x0)?;
    let cq = KernelConstants::cached(kernel, q)?;
    let cp = KernelConstants::cached(kernel, p)?;
    let global = QuantileProblem::new(y, DesignBlock::build(x, x0, q + 1, Window::Global)?);
    let mut warm: Option<QuantileSolution> = None;
    let mut previous_local: Option<ConstrainedFit> = None;

    let mut sched = BandwidthSchedule {
        grid: tau_grid.to_vec(),
        pilot: Vec::new(),
        main: Vec::new(),
        components: Vec::new(),
        n,
        p,
        q,
        bounds,
    };
    for &tau in tau_grid {
        let mut point = || -> Result<(f64, f64, PointComponents)> {
            let mut c = PointComponents { fx: ctx.fx, ..Default::default() };
            let (gfit, sol) = global.solve(tau, warm.as_ref())?;
            warm = Some(sol);
            let gc = [gfit.coeffs[2 * q + 1], gfit.coeffs[2 * q + 2]];
            c.pilot_derivatives = gc.map(|v| opts.derivative_rule.derivative(v, q + 1));
            let f_pilot = ctx.fyx(sample, x0, kernel, gfit.level())?;
            c.pilot_fyx = Some(f_pilot);
            let pv = if f_pilot > 0.0 {
                quantile_variance(&cq, p + 1, tau, ctx.fx, f_pilot)
            } else {
                c.warnings.push("conditional density at the pilot quantile is zero".into());
                f64::INFINITY
            };
            let pb = amse_bias_variance(&cq, p + 1, c.pilot_derivatives, [0.0, 0.0], ctx.fx)?.0;
            c.pilot_bias = pb;
            c.pilot_variance = pv;
            let pilot = checked_bandwidth(p + 1, q, pb, pv, n, bounds, "pilot", &mut c.warnings);

            let prob = QuantileProblem::new(y, DesignBlock::build(x, x0, p + 1, Window::Kernel { kernel, h: pilot })?);
            let (lfit, _) = match &previous_local {
                Some(prev) => prob.solve_near(tau, &prev.coeffs)?,
                None => prob.solve(tau, None)?,
            };
            let lc = [lfit.coeffs[2 * p + 1], lfit.coeffs[2 * p + 2]];
            c.derivatives = lc.map(|v| opts.derivative_rule.derivative(v, p + 1));
            c.level = lfit.level();
            let f_main = ctx.fyx(sample, x0, kernel, lfit.level())?;
            c.fyx = Some(f_main);
            let v = if f_main > 0.0 {
                quantile_variance(&cp, 1, tau, ctx.fx, f_main)
            } else {
                c.warnings.push("conditional density at the fitted quantile is zero".into());
                f64::INFINITY
            };
            let b = amse_bias_variance(&cp, 1, c.derivatives, [0.0, 0.0], ctx.fx)?.0;
            c.bias = b;
            c.variance = v;
            let main = checked_bandwidth(1, p, b, v, n, bounds, "main", &mut c.warnings);
            previous_local = Some(lfit);
            Ok((pilot, main, c))
        };
        let (pilot, main, c) = point().map_err(|e| e.at(tau))?;
        sched.pilot.push(pilot);
        sched.main.push(main);
        sched.components.push(c);
    }
    Ok(sched)
}

/// Plug-in bandwidths for the Lorenz effect on `tau_grid`, with quantile
/// pieces on `integration_grid`.
pub fn algorithm2_lorenz_bandwidths(
    sample: &Sample,
    x0: f64,
    tau_grid: &[f64],
    integration_grid: &[f64],
    opts: &BandwidthOptions,
) -> Result<LorenzSchedule> {
    opts.validate()?;
    let ctx = DensityContext::new(sample, x0, opts.kernel, opts.rule_of_thumb)?;
    let fine = quantile_schedule(sample, x0, integration_grid, opts, &ctx)?;
    let mean = algorithm1_bandwidths(sample, x0, &[x0], Transform::Identity, opts)?;
    lorenz_from_pieces(fine, mean, tau_grid)
}

/// Composes the Lorenz constants from quantile pieces on the integration grid
/// and the mean-effect pieces.
pub fn lorenz_from_pieces(
    fine: BandwidthSchedule,
    mean: BandwidthSchedule,
    tau_grid: &[f64],
) -> Result<LorenzSchedule> {
    let u = &fine.grid;
    let mc = &mean.components[0];
    let mu0 = mc.level;
    if !(mu0 > 0.0) {
        return Err(RkdError::NonpositiveMean { mu0 });
    }
    let levels: Vec<f64> = fine.components.iter().map(|c| c.level).collect();
    let y_u = rearrange_monotone(u, &levels)?;
    let bq: Vec<f64> = fine.components.iter().map(|c| c.bias).collect();
    let vq: Vec<f64> = fine.components.iter().map(|c| c.variance).collect();
    let (p, n) = (fine.p, fine.n);
    let mut reporting = BandwidthSchedule {
        grid: tau_grid.to_vec(),
        pilot: Vec::new(),
        main: Vec::new(),
        components: Vec::new(),
        ..fine.clone()
    };
    let mut lorenz = Vec::with_capacity(tau_grid.len());
    for &t in tau_grid {
        let l = integral_to(u, &y_u, t) / mu0;
        let bias = (integral_to(u, &bq, t) - l * mc.bias) / mu0;
        let variance = (integral_to(u, &vq, t) + l * l * mc.variance) / (mu0 * mu0);
        let mut c = PointComponents {
            bias,
            variance,
            fx: mc.fx,
            level: interpolate(u, &y_u, t),
            ..Default::default()
        };
        let main = checked_bandwidth(1, p, bias, variance, n, fine.bounds, "main", &mut c.warnings);
        reporting.pilot.push(interpolate(u, &fine.pilot, t));
        reporting.main.push(main);
        reporting.components.push(c);
        lorenz.push(l);
    }
    Ok(LorenzSchedule {
        reporting,
        fine,
        mean,
        mu0,
        lorenz,
    })
}
