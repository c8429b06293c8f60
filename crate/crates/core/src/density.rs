//! Kernel estimates of the running-variable density at the kink and of the
//! conditional outcome density there, with rule-of-thumb bandwidths.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, RkdError};
use crate::kernel::Kernel;

/// Density estimates used by variance formulas and the pivotal process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimates {
    pub fx_at_x0: f64,
    pub y_grid: Vec<f64>,
    pub fyx: Vec<f64>,
    pub vn: f64,
    pub h1: f64,
    pub h2: f64,
}

/// Constants of the conditional-density rule of thumb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleOfThumb {
    pub c: f64,
    pub b: f64,
}

impl Default for RuleOfThumb {
    fn default() -> Self {
        RuleOfThumb { c: 3.0, b: 1.0 }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Linear-interpolation quantile of already sorted data.
pub fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `2.576 · min{sd, IQR/1.349} · n^{-1/5}`.
pub fn rule_of_thumb_vn(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 10 {
        return Err(RkdError::InvalidInput(format!(
            "at least 10 observations are needed for the density bandwidth, got {n}"
        )));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let sd = sample_sd(x);
    let spread = sd.min(iqr / 1.349);
    if !(spread > 0.0) {
        return Err(RkdError::Degenerate(
            "running variable has no dispersion; density bandwidth undefined".into(),
        ));
    }
    Ok(2.576 * spread * (n as f64).powf(-0.2))
}

/// `(1/(n·vn)) Σ K((x_i − x0)/vn)`.
pub fn kde_at(x: &[f64], x0: f64, kernel: Kernel, vn: f64) -> Result<f64> {
    if !(vn > 0.0 && vn.is_finite()) {
        return Err(RkdError::InvalidInput(format!("density bandwidth must be positive, got {vn}")));
    }
    if x.is_empty() {
        return Err(RkdError::InvalidInput("empty sample".into()));
    }
    let s: f64 = x.iter().map(|&xi| kernel.eval((xi - x0) / vn)).sum();
    Ok(s / (x.len() as f64 * vn))
}

/// Bandwidths `(h1, h2)` for the outcome and running-variable directions of
/// the conditional density estimator, from the Bashtannyk–Hyndman normal
/// reference rule.
pub fn bashtannyk_hyndman_bandwidths(
    y: &[f64],
    x: &[f64],
    kernel: Kernel,
    rot: RuleOfThumb,
) -> Result<(f64, f64)> {
    if y.len() != x.len() {
        return Err(RkdError::LengthMismatch {
            expected: y.len(),
            got: x.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(RkdError::InvalidInput("too few observations for an OLS slope".into()));
    }
    let (c, b) = (rot.c, rot.b);
    if !(c > 0.0 && b > 0.0) {
        return Err(RkdError::InvalidInput("rule-of-thumb constants must be positive".into()));
    }
    let sx = sample_sd(x);
    let sy = sample_sd(y);
    if !(sx > 0.0) {
        return Err(RkdError::Degenerate("constant running variable; OLS slope undefined".into()));
    }
    if !(sy > 0.0) {
        return Err(RkdError::Degenerate("constant outcome; conditional density undefined".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let q = sxy / sxx;

    let std_normal = Normal::standard();
    let lambda = 2.0 * std_normal.cdf(c) - 1.0;
    let v = (2.0 * PI).sqrt() * sx.powi(3) * (3.0 * q * sx * sx + 8.0 * sy * sy) * lambda
        - 16.0 * c * sx * sx * sy * sy * (-c * c / 2.0).exp();
    if !(v > 0.0) {
        return Err(RkdError::Degenerate(format!(
            "conditional-density rule of thumb is undefined for c = {c} (v(c) = {v:.3e} is not positive)"
        )));
    }
    let rk = kernel.roughness();
    let varrho = kernel.second_moment();
    let num = 16.0 * c * rk * rk * sy.powi(5)
        * (288.0 * PI.powi(9) * sx.powi(58) * lambda * lambda).powf(0.125);
    let den = varrho.powi(4)
        * b.powf(2.5)
        * v.powf(0.75)
        * (v.sqrt() + b * (18.0 * PI * sx.powi(10) * lambda * lambda).powf(0.25));
    let h2 = (num / den).powf(1.0 / 6.0) * (n as f64).powf(-1.0 / 6.0);
    let h1 = (b * b * v / (3.0 * (2.0 * PI).sqrt() * sx.powi(5) * lambda)).powf(0.25) * h2;
    if !(h1.is_finite() && h2.is_finite() && h1 > 0.0 && h2 > 0.0) {
        return Err(RkdError::Degenerate("conditional-density bandwidths are not finite".into()));
    }
    Ok((h1, h2))
}

/// Nadaraya–Watson estimate of `f_{Y|X}(y0 | x0)`.
pub fn conditional_density(
    y0: f64,
    x0: f64,
    y: &[f64],
    x: &[f64],
    kernel: Kernel,
    h1: f64,
    h2: f64,
) -> Result<f64> {
    conditional_density_grid(&[y0], x0, y, x, kernel, h1, h2).map(|v| v[0])
}

/// [`conditional_density`] at several outcome values, sharing the x-window.
pub fn conditional_density_grid(
    y0: &[f64],
    x0: f64,
    y: &[f64],
    x: &[f64],
    kernel: Kernel,
    h1: f64,
    h2: f64,
) -> Result<Vec<f64>> {
    if y.len() != x.len() {
        return Err(RkdError::LengthMismatch {
            expected: y.len(),
            got: x.len(),
        });
    }
    if !(h1 > 0.0 && h2 > 0.0) {
        return Err(RkdError::InvalidInput("conditional-density bandwidths must be positive".into()));
    }
    let window: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter_map(|(&xi, &yi)| {
            let wx = kernel.eval((xi - x0) / h2);
            (wx > 0.0).then_some((wx, yi))
        })
        .collect();
    let denom: f64 = window.iter().map(|w| w.0).sum();
    if window.is_empty() || denom <= 0.0 {
        return Err(RkdError::EmptyWindow);
    }
    Ok(y0
        .iter()
        .map(|&t| {
            let num: f64 = window.iter().map(|&(wx, yi)| wx * kernel.eval((yi - t) / h1)).sum();
            num / (h1 * denom)
        })
        .collect())
}
