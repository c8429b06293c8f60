//! Adaptive Gauss–Legendre quadrature for vector-valued integrands.

use std::f64::consts::PI;
use std::sync::OnceLock;

const ORDER: usize = 20;
const MAX_DEPTH: usize = 30;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

fn panel<F>(f: &F, a: f64, b: f64, dim: usize, buf: &mut Vec<f64>) -> Vec<f64>
where
    F: Fn(f64, &mut [f64]),
{
    let (nodes, weights) = rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = vec![0.0; dim];
    buf.resize(dim, 0.0);
    for (x, w) in nodes.iter().zip(weights) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(mid + half * x, buf);
        for (s, v) in acc.iter_mut().zip(buf.iter()) {
            *s += w * half * v;
        }
    }
    acc
}

/// Integrates the `dim`-valued function `f` over `[a, b]`.
///
/// `f(x, out)` writes the integrand at `x` into `out`. Panels are bisected
/// until the 20-point rule agrees with the sum over both halves to within
/// `tol` in every component.
pub fn integrate<F>(f: F, a: f64, b: f64, dim: usize, tol: f64) -> Vec<f64>
where
    F: Fn(f64, &mut [f64]),
{
    if a == b {
        return vec![0.0; dim];
    }
    let mut buf = Vec::with_capacity(dim);
    let whole = panel(&f, a, b, dim, &mut buf);
    recurse(&f, a, b, whole, dim, tol, 0, &mut buf)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    whole: Vec<f64>,
    dim: usize,
    tol: f64,
    depth: usize,
    buf: &mut Vec<f64>,
) -> Vec<f64>
where
    F: Fn(f64, &mut [f64]),
{
    let mid = 0.5 * (a + b);
    let left = panel(f, a, mid, dim, buf);
    let right = panel(f, mid, b, dim, buf);
    let err = whole
        .iter()
        .zip(left.iter().zip(&right))
        .map(|(w, (l, r))| (w - l - r).abs())
        .fold(0.0, f64::max);
    if err <= tol || depth >= MAX_DEPTH {
        return left.iter().zip(&right).map(|(l, r)| l + r).collect();
    }
    let l = recurse(f, a, mid, left, dim, 0.5 * tol, depth + 1, buf);
    let r = recurse(f, mid, b, right, dim, 0.5 * tol, depth + 1, buf);
    l.iter().zip(&r).map(|(x, y)| x + y).collect()
}

/// Scalar convenience wrapper around [`integrate`].
pub fn integrate_scalar<F>(f: F, a: f64, b: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    integrate(|x, out| out[0] = f(x), a, b, 1, tol)[0]
}

/// Trapezoid weights for integrating over `[0, grid[upto]]` on an increasing
/// grid whose first node lies above zero. The leading interval `[0, grid[0]]`
/// is a rectangle at the value of the first node.
pub fn cumulative_trapezoid_weights(grid: &[f64], upto: usize) -> Vec<f64> {
    let mut w = vec![0.0; grid.len()];
    if grid.is_empty() {
        return w;
    }
    w[0] += grid[0];
    for j in 0..upto {
        let dx = grid[j + 1] - grid[j];
        w[j] += 0.5 * dx;
        w[j + 1] += 0.5 * dx;
    }
    w
}

/// Integral of tabulated `values` from zero to each grid node, using the
/// same rule as [`cumulative_trapezoid_weights`].
pub fn cumulative_integral(grid: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    if grid.is_empty() {
        return out;
    }
    let mut acc = grid[0] * values[0];
    out.push(acc);
    for j in 1..grid.len() {
        acc += 0.5 * (grid[j] - grid[j - 1]) * (values[j] + values[j - 1]);
        out.push(acc);
    }
    out
}

/// Trapezoid average `(1/|G|) ∫_G v` over the span of `grid`.
/// A single point averages to its own value.
pub fn trapezoid_mean(grid: &[f64], values: &[f64]) -> f64 {
    let n = grid.len();
    if n == 1 {
        return values[0];
    }
    let span = grid[n - 1] - grid[0];
    if span == 0.0 {
        return values.iter().sum::<f64>() / n as f64;
    }
    let mut acc = 0.0;
    for j in 1..n {
        acc += 0.5 * (grid[j] - grid[j - 1]) * (values[j] + values[j - 1]);
    }
    acc / span
}
