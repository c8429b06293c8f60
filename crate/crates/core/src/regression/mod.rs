//! Continuity-constrained local polynomial fits: kernel-weighted least squares
//! and kernel-weighted check-loss minimisation.

mod quantile;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::kernel::{basis_len, fill_basis, Kernel};

pub use quantile::QuantileSolution;

const MAX_CONDITION: f64 = 1e12;

/// Outcome, running variable and optional treatment, all of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(y: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if y.len() != x.len() {
            return Err(RkdError::LengthMismatch {
                expected: y.len(),
                got: x.len(),
            });
        }
        if y.is_empty() {
            return Err(RkdError::InvalidInput("sample is empty".into()));
        }
        check_finite("y", &y)?;
        check_finite("x", &x)?;
        Ok(Sample { y, x, b: None })
    }

    pub fn with_treatment(mut self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.y.len() {
            return Err(RkdError::LengthMismatch {
                expected: self.y.len(),
                got: b.len(),
            });
        }
        check_finite("b", &b)?;
        self.b = Some(b);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Checks the treatment column against a deterministic rule `b = rule(x)`.
    pub fn check_rule(&self, rule: impl Fn(f64) -> f64, tol: f64) -> Result<()> {
        let Some(b) = &self.b else { return Ok(()) };
        for (i, (&bi, &xi)) in b.iter().zip(&self.x).enumerate() {
            let expect = rule(xi);
            if (bi - expect).abs() > tol {
                return Err(RkdError::InvalidInput(format!(
                    "treatment at row {i} is {bi} but the declared rule gives {expect}"
                )));
            }
        }
        Ok(())
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|a| !a.is_finite()) {
        Some(i) => Err(RkdError::InvalidInput(format!(
            "non-finite value in column {name} at row {i}"
        ))),
        None => Ok(()),
    }
}

/// Coefficients of a constrained fit of order `p` around `x0`, in the units of
/// the running variable: `(level, d1⁺/1!, d1⁻/1!, …, dp⁺/p!, dp⁻/p!)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedFit {
    pub p: usize,
    pub x0: f64,
    /// Bandwidth; infinite for an unweighted global fit.
    pub h: f64,
    pub coeffs: Vec<f64>,
    pub n_eff_left: usize,
    pub n_eff_right: usize,
    pub objective: f64,
}

impl ConstrainedFit {
    pub fn level(&self) -> f64 {
        self.coeffs[0]
    }

    /// The `nu`-th one-sided derivative at `x0`.
    pub fn derivative(&self, nu: usize, right: bool) -> f64 {
        assert!(nu >= 1 && nu <= self.p);
        let slot = if right { 2 * nu - 1 } else { 2 * nu };
        factorial(nu) * self.coeffs[slot]
    }

    /// Right minus left first derivative.
    pub fn slope_gap(&self) -> f64 {
        self.coeffs[1] - self.coeffs[2]
    }

    pub fn fitted(&self, x: f64) -> f64 {
        let mut r = vec![0.0; self.coeffs.len()];
        fill_basis(self.p, x - self.x0, &mut r);
        r.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// How observations are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    /// Weights `K((x - x0)/h)`; only kernel-positive points enter.
    Kernel { kernel: Kernel, h: f64 },
    /// Unit weights on every observation.
    Global,
}

/// In-window observations with the basis evaluated at the scaled argument
/// `(x - x0)/scale`. Coefficients found on this design map back to raw units
/// by dividing slot `j` by `scale^power(j)`.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub p: usize,
    pub x0: f64,
    pub h: f64,
    pub scale: f64,
    pub idx: Vec<usize>,
    /// Row-major `m × (2p+1)` basis values.
    pub rows: Vec<f64>,
    pub w: Vec<f64>,
    pub left: usize,
    pub right: usize,
}

impl DesignBlock {
    pub fn build(x: &[f64], x0: f64, p: usize, window: Window) -> Result<Self> {
        if p == 0 {
            return Err(RkdError::InvalidInput("polynomial order must be at least 1".into()));
        }
        let k = basis_len(p);
        let (scale, h) = match window {
            Window::Kernel { h, .. } => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(RkdError::InvalidInput(format!("bandwidth must be positive, got {h}")));
                }
                (h, h)
            }
            Window::Global => {
                let s = x.iter().map(|v| (v - x0).abs()).fold(0.0, f64::max);
                (if s > 0.0 { s } else { 1.0 }, f64::INFINITY)
            }
        };
        let mut idx = Vec::new();
        let mut rows = Vec::new();
        let mut w = Vec::new();
        let (mut left, mut right) = (0, 0);
        let mut buf = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            let u = (xi - x0) / scale;
            let wi = match window {
                Window::Kernel { kernel, .. } => kernel.eval(u),
                Window::Global => 1.0,
            };
            if wi <= 0.0 {
                continue;
            }
            if xi >= x0 {
                right += 1;
            } else {
                left += 1;
            }
            fill_basis(p, u, &mut buf);
            rows.extend_from_slice(&buf);
            idx.push(i);
            w.push(wi);
        }
        if left < p + 1 || right < p + 1 {
            return Err(RkdError::Identification {
                left,
                right,
                required: p + 1,
            });
        }
        Ok(DesignBlock {
            p,
            x0,
            h,
            scale,
            idx,
            rows,
            w,
            left,
            right,
        })
    }

    pub fn k(&self) -> usize {
        basis_len(self.p)
    }

    pub fn m(&self) -> usize {
        self.idx.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.rows[i * k..(i + 1) * k]
    }

    /// Converts scaled-design coefficients to raw running-variable units.
    pub fn unscale(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .enumerate()
            .map(|(j, b)| b / self.scale.powi(j.div_ceil(2) as i32))
            .collect()
    }

    pub fn rescale(&self, coeffs: &[f64]) -> Vec<f64> {
        coeffs
            .iter()
            .enumerate()
            .map(|(j, b)| b * self.scale.powi(j.div_ceil(2) as i32))
            .collect()
    }

    fn fit(&self, coeffs: Vec<f64>, objective: f64) -> ConstrainedFit {
        ConstrainedFit {
            p: self.p,
            x0: self.x0,
            h: self.h,
            coeffs,
            n_eff_left: self.left,
            n_eff_right: self.right,
            objective,
        }
    }
}

/// A factored weighted least-squares problem; solves many right-hand sides on
/// one design.
#[derive(Debug, Clone)]
pub struct LsFactor {
    design: DesignBlock,
    /// Maps a weighted, in-window response to scaled coefficients (k × m).
    solver: DMatrix<f64>,
    sqrt_w: Vec<f64>,
    pub condition: f64,
}

impl LsFactor {
    pub fn new(design: DesignBlock) -> Result<Self> {
        let (m, k) = (design.m(), design.k());
        let sqrt_w: Vec<f64> = design.w.iter().map(|w| w.sqrt()).collect();
        let mut a = DMatrix::from_fn(m, k, |i, j| sqrt_w[i] * design.rows[i * k + j]);
        let norms: Vec<f64> = (0..k).map(|j| a.column(j).norm()).collect();
        if norms.iter().any(|&c| c == 0.0) {
            return Err(RkdError::IllConditioned {
                condition: f64::INFINITY,
            });
        }
        for j in 0..k {
            a.column_mut(j).scale_mut(1.0 / norms[j]);
        }
        let qr = a.qr();
        let r = qr.r();
        let sv = r.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
        if condition > MAX_CONDITION {
            return Err(RkdError::IllConditioned { condition });
        }
        let r_inv = r
            .try_inverse()
            .ok_or(RkdError::IllConditioned { condition })?;
        let mut solver = r_inv * qr.q().transpose();
        for j in 0..k {
            solver.row_mut(j).scale_mut(1.0 / norms[j]);
        }
        Ok(LsFactor {
            design,
            solver,
            sqrt_w,
            condition,
        })
    }

    pub fn design(&self) -> &DesignBlock {
        &self.design
    }

    /// Fits the full-length response `z`.
    pub fn solve(&self, z: &[f64]) -> ConstrainedFit {
        let d = &self.design;
        let zw = DVector::from_iterator(
            d.m(),
            d.idx.iter().zip(&self.sqrt_w).map(|(&i, s)| s * z[i]),
        );
        let beta = &self.solver * zw;
        let objective = (0..d.m())
            .map(|i| {
                let f: f64 = d.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                d.w[i] * (z[d.idx[i]] - f).powi(2)
            })
            .sum();
        d.fit(d.unscale(beta.as_slice()), objective)
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(RkdError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Kernel-weighted least squares of `z` on the constrained basis around `x0`.
pub fn fit_constrained_wls(
    z: &[f64],
    x: &[f64],
    x0: f64,
    p: usize,
    h: f64,
    kernel: Kernel,
) -> Result<ConstrainedFit> {
    check_lengths(z, x)?;
    let design = DesignBlock::build(x, x0, p, Window::Kernel { kernel, h })?;
    Ok(LsFactor::new(design)?.solve(z))
}

/// Unweighted least squares on the constrained basis over all observations.
pub fn fit_global_ls(z: &[f64], x: &[f64], x0: f64, p: usize) -> Result<ConstrainedFit> {
    check_lengths(z, x)?;
    let design = DesignBlock::build(x, x0, p, Window::Global)?;
    Ok(LsFactor::new(design)?.solve(z))
}

/// A check-loss problem on a fixed design, solvable for many quantile levels.
#[derive(Debug, Clone)]
pub struct QuantileProblem {
    design: DesignBlock,
    y: Vec<f64>,
}

impl QuantileProblem {
    pub fn new(y: &[f64], design: DesignBlock) -> Self {
        let y = design.idx.iter().map(|&i| y[i]).collect();
        QuantileProblem { design, y }
    }

    pub fn design(&self) -> &DesignBlock {
        &self.design
    }

    /// Solves at level `tau`, optionally starting from the optimal basis of a
    /// nearby level.
    pub fn solve(
        &self,
        tau: f64,
        warm: Option<&QuantileSolution>,
    ) -> Result<(ConstrainedFit, QuantileSolution)> {
        let start = warm.map_or(quantile::Start::Cold, quantile::Start::Basis);
        self.run(tau, start)
    }

    /// Solves at level `tau` starting from raw-unit coefficients, typically
    /// the optimum of a nearby problem on a different window.
    pub fn solve_near(&self, tau: f64, coeffs: &[f64]) -> Result<(ConstrainedFit, QuantileSolution)> {
        let scaled = self.design.rescale(coeffs);
        self.run(tau, quantile::Start::Coefficients(&scaled))
    }

    fn run(&self, tau: f64, start: quantile::Start<'_>) -> Result<(ConstrainedFit, QuantileSolution)> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(RkdError::InvalidInput(format!("quantile level {tau} is outside (0, 1)")));
        }
        let d = &self.design;
        let sol = quantile::solve(&d.rows, &d.w, &self.y, d.k(), tau, start)?;
        let fit = d.fit(d.unscale(&sol.beta), sol.objective);
        Ok((fit, sol))
    }
}

/// Kernel-weighted check-loss fit of `y` on the constrained basis.
pub fn fit_constrained_quantile(
    y: &[f64],
    x: &[f64],
    tau: f64,
    x0: f64,
    p: usize,
    h: f64,
    kernel: Kernel,
) -> Result<ConstrainedFit> {
    check_lengths(y, x)?;
    let design = DesignBlock::build(x, x0, p, Window::Kernel { kernel, h })?;
    Ok(QuantileProblem::new(y, design).solve(tau, None)?.0)
}

/// Unweighted check-loss fit over all observations.
pub fn fit_global_quantile(
    y: &[f64],
    x: &[f64],
    tau: f64,
    x0: f64,
    p: usize,
) -> Result<ConstrainedFit> {
    check_lengths(y, x)?;
    let design = DesignBlock::build(x, x0, p, Window::Global)?;
    Ok(QuantileProblem::new(y, design).solve(tau, None)?.0)
}

/// Monotone rearrangement of a curve tabulated on an increasing grid.
pub fn rearrange_monotone(taus: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    check_lengths(taus, values)?;
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RkdError::InvalidInput("grid must be strictly increasing".into()));
    }
    let mut out = values.to_vec();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// `z - fitted` inside `|x - x0| ≤ h`, zero elsewhere.
pub fn residuals(fit: &ConstrainedFit, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_lengths(z, x)?;
    let k = fit.coeffs.len();
    let mut r = vec![0.0; k];
    Ok(z.iter()
        .zip(x)
        .map(|(&zi, &xi)| {
            let u = xi - fit.x0;
            if u.abs() > fit.h {
                return 0.0;
            }
            fill_basis(fit.p, u, &mut r);
            zi - r.iter().zip(&fit.coeffs).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}
