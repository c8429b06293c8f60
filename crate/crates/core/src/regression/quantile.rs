//! Weighted check-loss minimisation.
//!
//! A smoothed Newton phase (replacing |r| by sqrt(r² + δ²) with shrinking δ)
//! brings the coefficients close to the optimum. An exact vertex is then
//! reached by simplex pivots: the basis holds `k` observations that are
//! interpolated exactly, and each pivot follows the steepest descending edge
//! with an exact line search over the breakpoints of the piecewise-linear
//! objective.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RkdError};

const MAX_PIVOTS: usize = 10_000;
const SMOOTHING_LEVELS: [f64; 3] = [1e-1, 1e-2, 1e-3];
const NEWTON_ITERS: usize = 40;

/// Optimal coefficients together with the interpolated basis, reusable as a
/// warm start at a nearby quantile level.
#[derive(Debug, Clone)]
pub struct QuantileSolution {
    pub(crate) beta: Vec<f64>,
    pub(crate) basis: Vec<usize>,
    pub objective: f64,
    pub pivots: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn rho(tau: f64, r: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

/// Where the simplex phase starts.
pub(crate) enum Start<'a> {
    Cold,
    /// Optimal basis at a nearby level on the same design.
    Basis(&'a QuantileSolution),
    /// Coefficients (on the scaled design) close to the optimum.
    Coefficients(&'a [f64]),
}

pub(crate) fn solve(
    rows: &[f64],
    w: &[f64],
    y: &[f64],
    k: usize,
    tau: f64,
    start: Start<'_>,
) -> Result<QuantileSolution> {
    let m = w.len();
    let yscale = y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let warm = match start {
        Start::Basis(s) => basis_inverse(rows, k, &s.basis).map(|_| s.basis.clone()),
        _ => None,
    };
    let basis = match warm {
        Some(b) => b,
        None => {
            let start = match start {
                Start::Coefficients(c) if c.len() == k => c.to_vec(),
                _ => smoothed_start(rows, w, y, k, tau)?,
            };
            let r: Vec<f64> = (0..m).map(|i| y[i] - dot(&rows[i * k..(i + 1) * k], &start)).collect();
            greedy_basis(rows, k, &r)?
        }
    };
    simplex(rows, w, y, k, tau, basis, yscale)
}

/// Inverse of the `k × k` matrix of basis rows, or `None` when singular.
fn basis_inverse(rows: &[f64], k: usize, basis: &[usize]) -> Option<DMatrix<f64>> {
    if basis.len() != k {
        return None;
    }
    let xb = DMatrix::from_fn(k, k, |a, j| rows[basis[a] * k + j]);
    let lu = xb.lu();
    let inv = lu.try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

fn wls_start(rows: &[f64], w: &[f64], y: &[f64], k: usize) -> Result<DVector<f64>> {
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (i, (&wi, &yi)) in w.iter().zip(y).enumerate() {
        let a = &rows[i * k..(i + 1) * k];
        for r in 0..k {
            b[r] += wi * a[r] * yi;
            for c in 0..=r {
                g[(r, c)] += wi * a[r] * a[c];
            }
        }
    }
    g.fill_upper_triangle_with_lower_triangle();
    g.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| RkdError::Degenerate("quantile design is rank deficient".into()))
}

fn smoothed_start(rows: &[f64], w: &[f64], y: &[f64], k: usize, tau: f64) -> Result<Vec<f64>> {
    let m = w.len();
    let mut beta = wls_start(rows, w, y, k)?;
    let wsum: f64 = w.iter().sum();
    let mean = dot(w, y) / wsum;
    let spread = (w.iter().zip(y).map(|(wi, yi)| wi * (yi - mean).powi(2)).sum::<f64>() / wsum).sqrt();
    let s = if spread > 0.0 { spread } else { 1.0 };
    let half = tau - 0.5;
    let smooth_obj = |beta: &DVector<f64>, delta: f64| -> f64 {
        (0..m)
            .map(|i| {
                let r = y[i] - dot(&rows[i * k..(i + 1) * k], beta.as_slice());
                w[i] * (half * r + 0.5 * (r * r + delta * delta).sqrt())
            })
            .sum()
    };
    for level in SMOOTHING_LEVELS {
        let delta = level * s;
        let mut f = smooth_obj(&beta, delta);
        for _ in 0..NEWTON_ITERS {
            let mut grad = DVector::<f64>::zeros(k);
            let mut hess = DMatrix::<f64>::zeros(k, k);
            for i in 0..m {
                let a = &rows[i * k..(i + 1) * k];
                let r = y[i] - dot(a, beta.as_slice());
                let root = (r * r + delta * delta).sqrt();
                let gi = w[i] * (half + 0.5 * r / root);
                let hi = w[i] * 0.5 * delta * delta / (root * root * root);
                for p in 0..k {
                    grad[p] -= gi * a[p];
                    let ha = hi * a[p];
                    for q in 0..=p {
                        hess[(p, q)] += ha * a[q];
                    }
                }
            }
            hess.fill_upper_triangle_with_lower_triangle();
            let ridge = 1e-12 * hess.diagonal().max().max(1e-300);
            for p in 0..k {
                hess[(p, p)] += ridge;
            }
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&(-&grad));
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &beta + t * &step;
                let fc = smooth_obj(&cand, delta);
                if fc <= f {
                    let gain = f - fc;
                    beta = cand;
                    f = fc;
                    accepted = gain > 1e-13 * f.abs().max(1e-300);
                    break;
                }
                t *= 0.5;
            }
            if !accepted || t * step.amax() < 1e-10 * (1.0 + beta.amax()) {
                break;
            }
        }
    }
    Ok(beta.as_slice().to_vec())
}

/// Picks `k` linearly independent rows, preferring small absolute residuals.
fn greedy_basis(rows: &[f64], k: usize, r: &[f64]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut basis = Vec::with_capacity(k);
    for i in order {
        let a = &rows[i * k..(i + 1) * k];
        let norm = dot(a, a).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v = a.to_vec();
        for _ in 0..2 {
            for e in &q {
                let c = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, y)| *x -= c * y);
            }
        }
        let vn = dot(&v, &v).sqrt();
        if vn > 1e-8 * norm {
            v.iter_mut().for_each(|x| *x /= vn);
            q.push(v);
            basis.push(i);
            if basis.len() == k {
                return Ok(basis);
            }
        }
    }
    Err(RkdError::Degenerate(
        "fewer linearly independent in-window observations than coefficients".into(),
    ))
}

fn simplex(
    rows: &[f64],
    w: &[f64],
    y: &[f64],
    k: usize,
    tau: f64,
    mut basis: Vec<usize>,
    yscale: f64,
) -> Result<QuantileSolution> {
    let m = w.len();
    let ztol = 1e-11 * yscale;
    let wsum: f64 = w.iter().sum();
    let slope_tol = 1e-12 * wsum;
    let mut in_basis = vec![false; m];
    basis.iter().for_each(|&i| in_basis[i] = true);
    let mut r = vec![0.0; m];
    let mut c = vec![0.0; m];
    let mut breaks: Vec<Reverse<Breakpoint>> = Vec::new();
    let mut last_obj = f64::INFINITY;

    for pivots in 0..=MAX_PIVOTS {
        let inv = basis_inverse(rows, k, &basis)
            .ok_or_else(|| RkdError::Degenerate("singular simplex basis".into()))?;
        let yb = DVector::from_iterator(k, basis.iter().map(|&i| y[i]));
        let beta = &inv * yb;
        let mut g = vec![0.0; k];
        let mut zero_set = Vec::new();
        let mut obj = 0.0;
        for i in 0..m {
            let a = &rows[i * k..(i + 1) * k];
            let ri = if in_basis[i] { 0.0 } else { y[i] - dot(a, beta.as_slice()) };
            r[i] = ri;
            obj += w[i] * rho(tau, ri);
            if in_basis[i] {
                continue;
            }
            if ri.abs() <= ztol {
                zero_set.push(i);
            } else {
                let psi = if ri < 0.0 { tau - 1.0 } else { tau };
                g.iter_mut().zip(a).for_each(|(gj, aj)| *gj += w[i] * psi * aj);
            }
        }
        last_obj = obj;
        if pivots == MAX_PIVOTS {
            break;
        }
        // v = X_B^{-T} g, so an edge (j, σ) has slope −σ v_j plus kink terms.
        let v: Vec<f64> = (0..k).map(|j| (0..k).map(|l| g[l] * inv[(l, j)]).sum()).collect();
        let zero_proj: Vec<Vec<f64>> = zero_set
            .iter()
            .map(|&i| {
                let a = &rows[i * k..(i + 1) * k];
                (0..k).map(|j| (0..k).map(|l| a[l] * inv[(l, j)]).sum()).collect()
            })
            .collect();
        let mut best: Option<(f64, usize, f64)> = None;
        for j in 0..k {
            for sigma in [1.0, -1.0] {
                let mut s = -sigma * v[j] + w[basis[j]] * rho(tau, -sigma);
                for (zi, &i) in zero_set.iter().enumerate() {
                    s += w[i] * rho(tau, -sigma * zero_proj[zi][j]);
                }
                if s < -slope_tol && best.is_none_or(|b| s < b.0) {
                    best = Some((s, j, sigma));
                }
            }
        }
        let Some((s0, j, sigma)) = best else {
            return Ok(QuantileSolution {
                beta: beta.as_slice().to_vec(),
                basis,
                objective: obj,
                pivots,
            });
        };

        // Exact line search along d = σ X_B^{-1} e_j.
        let d: Vec<f64> = (0..k).map(|l| sigma * inv[(l, j)]).collect();
        breaks.clear();
        for i in 0..m {
            if in_basis[i] {
                continue;
            }
            c[i] = dot(&rows[i * k..(i + 1) * k], &d);
            if r[i].abs() > ztol && c[i] != 0.0 {
                let t = r[i] / c[i];
                if t > 0.0 {
                    breaks.push(Reverse(Breakpoint(t, i)));
                }
            }
        }
        let mut heap = BinaryHeap::from(std::mem::take(&mut breaks));
        let mut slope = s0;
        let mut entering = None;
        while let Some(Reverse(Breakpoint(_, i))) = heap.pop() {
            slope += w[i] * c[i].abs();
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        breaks = heap.into_vec();
        breaks.clear();
        let Some(enter) = entering else {
            return Err(RkdError::Degenerate("check-loss objective is unbounded".into()));
        };
        in_basis[basis[j]] = false;
        in_basis[enter] = true;
        basis[j] = enter;
    }
    Err(RkdError::Convergence {
        iterations: MAX_PIVOTS,
        objective: last_obj,
    })
}

/// Line-search breakpoint ordered by step length, then observation index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Breakpoint(f64, usize);

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}
