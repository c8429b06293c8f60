//! Compact kernels, the continuity-constrained polynomial basis and the
//! kernel-dependent constant matrices built from them.
//!
//! The basis of order `p` is
//! `r(u) = (1, u·1{u≥0}, u·1{u<0}, …, u^p·1{u≥0}, u^p·1{u<0})`, a single
//! intercept shared by both sides with separate slope terms left and right of
//! zero. Every constant is an integral of products of this basis against the
//! kernel; the basis has a kink at zero so each integral is split there.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::quadrature;

const QUAD_TOL: f64 = 1e-10;

/// Supported compact, symmetric kernels (each integrates to one on [-1, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Tricube,
    Triangular,
    Epanechnikov,
    Uniform,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::Tricube,
        Kernel::Triangular,
        Kernel::Epanechnikov,
        Kernel::Uniform,
    ];

    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Tricube => {
                let t = 1.0 - a * a * a;
                70.0 / 81.0 * t * t * t
            }
            Kernel::Triangular => 1.0 - a,
            Kernel::Epanechnikov => 0.75 * (1.0 - u * u),
            Kernel::Uniform => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Tricube => "tricube",
            Kernel::Triangular => "triangular",
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Uniform => "uniform",
        }
    }

    /// `∫ K(u)^2 du`.
    pub fn roughness(self) -> f64 {
        self.moment_integral(|_, k| k * k)
    }

    /// `∫ u^2 K(u) du`.
    pub fn second_moment(self) -> f64 {
        self.moment_integral(|u, k| u * u * k)
    }

    fn moment_integral(self, g: impl Fn(f64, f64) -> f64) -> f64 {
        let f = |u: f64| g(u, self.eval(u));
        quadrature::integrate_scalar(&f, -1.0, 0.0, QUAD_TOL)
            + quadrature::integrate_scalar(&f, 0.0, 1.0, QUAD_TOL)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = RkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tricube" => Ok(Kernel::Tricube),
            "triangular" => Ok(Kernel::Triangular),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            "uniform" => Ok(Kernel::Uniform),
            "gaussian" | "normal" => Err(RkdError::InvalidInput(
                "the Gaussian kernel is not compactly supported and is not allowed".into(),
            )),
            other => Err(RkdError::InvalidInput(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Which part of the real line an integral runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
    Full,
}

/// Number of basis functions for order `p`.
#[inline]
pub fn basis_len(p: usize) -> usize {
    2 * p + 1
}

/// Writes the constrained basis of order `p` at `u` into `out` (length `2p+1`).
#[inline]
pub fn fill_basis(p: usize, u: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), basis_len(p));
    out[0] = 1.0;
    let right = u >= 0.0;
    let mut pow = 1.0;
    for k in 1..=p {
        pow *= u;
        if right {
            out[2 * k - 1] = pow;
            out[2 * k] = 0.0;
        } else {
            out[2 * k - 1] = 0.0;
            out[2 * k] = pow;
        }
    }
}

/// The constrained basis of order `p` at `u`.
pub fn basis_vector(p: usize, u: f64) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(RkdError::InvalidInput(
            "polynomial order must be at least 1 to estimate a derivative".into(),
        ));
    }
    let mut out = vec![0.0; basis_len(p)];
    fill_basis(p, u, &mut out);
    Ok(out)
}

/// Kernel-dependent constants for a polynomial order `p`:
/// `Γ = ∫ r rᵀ K`, `ϑ±_q = ∫_{R±} r u^q K` and `Ψ± = ∫_{R±} r rᵀ K²`.
#[derive(Debug, Clone)]
pub struct KernelConstants {
    pub kernel: Kernel,
    pub p: usize,
    pub gamma: DMatrix<f64>,
    pub gamma_inv: DMatrix<f64>,
    /// `(q, ϑ⁺_{p,q}, ϑ⁻_{p,q})` for each requested moment order.
    pub theta: Vec<(usize, DVector<f64>, DVector<f64>)>,
    pub psi_plus: DMatrix<f64>,
    pub psi_minus: DMatrix<f64>,
    pub psi_full: DMatrix<f64>,
}

impl KernelConstants {
    pub fn theta_plus(&self, q: usize) -> Option<&DVector<f64>> {
        self.theta.iter().find(|t| t.0 == q).map(|t| &t.1)
    }

    pub fn theta_minus(&self, q: usize) -> Option<&DVector<f64>> {
        self.theta.iter().find(|t| t.0 == q).map(|t| &t.2)
    }

    /// `Γ⁻¹(ι_{2ν} − ι_{2ν+1})`: contracting a basis vector with this gives the
    /// right-minus-left coefficient of the `ν`-th power.
    pub fn slope_gap_weights(&self, nu: usize) -> DVector<f64> {
        assert!(nu >= 1 && nu <= self.p, "derivative order out of range");
        let k = basis_len(self.p);
        let mut sel = DVector::zeros(k);
        sel[2 * nu - 1] = 1.0;
        sel[2 * nu] = -1.0;
        &self.gamma_inv * sel
    }

    /// Constants with moment orders `0..=p+2`, memoised per (kernel, p).
    pub fn cached(kernel: Kernel, p: usize) -> Result<Arc<KernelConstants>> {
        type Cache = Mutex<HashMap<(Kernel, usize), Arc<KernelConstants>>>;
        static CACHE: OnceLock<Cache> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(c) = cache.lock().unwrap().get(&(kernel, p)) {
            return Ok(Arc::clone(c));
        }
        let qs: Vec<usize> = (0..=p + 2).collect();
        let built = Arc::new(kernel_constants(kernel, p, &qs)?);
        cache
            .lock()
            .unwrap()
            .entry((kernel, p))
            .or_insert_with(|| Arc::clone(&built));
        Ok(built)
    }
}

/// Computes the constant matrices by quadrature split at zero.
pub fn kernel_constants(kernel: Kernel, p: usize, q_list: &[usize]) -> Result<KernelConstants> {
    if p == 0 {
        return Err(RkdError::InvalidInput("polynomial order must be at least 1".into()));
    }
    let k = basis_len(p);
    let nq = q_list.len();
    let dim = 2 * k * k + k * nq;
    let integrand = |u: f64, out: &mut [f64]| {
        let mut r = vec![0.0; k];
        fill_basis(p, u, &mut r);
        let kv = kernel.eval(u);
        for i in 0..k {
            for j in 0..k {
                let rr = r[i] * r[j];
                out[i * k + j] = rr * kv;
                out[k * k + i * k + j] = rr * kv * kv;
            }
        }
        for (qi, &q) in q_list.iter().enumerate() {
            let uq = u.powi(q as i32);
            for i in 0..k {
                out[2 * k * k + qi * k + i] = r[i] * uq * kv;
            }
        }
    };
    let minus = quadrature::integrate(integrand, -1.0, 0.0, dim, QUAD_TOL);
    let plus = quadrature::integrate(integrand, 0.0, 1.0, dim, QUAD_TOL);

    let gamma = DMatrix::from_fn(k, k, |i, j| minus[i * k + j] + plus[i * k + j]);
    let psi_plus = DMatrix::from_fn(k, k, |i, j| plus[k * k + i * k + j]);
    let psi_minus = DMatrix::from_fn(k, k, |i, j| minus[k * k + i * k + j]);
    let psi_full = &psi_plus + &psi_minus;
    let theta = q_list
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let off = 2 * k * k + qi * k;
            (
                q,
                DVector::from_fn(k, |i, _| plus[off + i]),
                DVector::from_fn(k, |i, _| minus[off + i]),
            )
        })
        .collect();

    let chol = gamma.clone().cholesky().ok_or_else(|| RkdError::SingularKernelConstants {
        kernel: kernel.to_string(),
        p,
    })?;
    let gamma_inv = chol.inverse();
    Ok(KernelConstants {
        kernel,
        p,
        gamma,
        gamma_inv,
        theta,
        psi_plus,
        psi_minus,
        psi_full,
    })
}

/// `(s1 s2)^{-1/2} ∫ r(u/s1) r(u/s2)ᵀ K(u/s1) K(u/s2) du` over the requested
/// side. This is the covariance kernel of processes evaluated at two
/// bandwidths in the ratio `s1 : s2`.
pub fn cross_kernel_matrix(
    kernel: Kernel,
    p: usize,
    s1: f64,
    s2: f64,
    side: Side,
) -> Result<DMatrix<f64>> {
    if !(s1 > 0.0 && s2 > 0.0) || !s1.is_finite() || !s2.is_finite() {
        return Err(RkdError::InvalidInput(format!(
            "bandwidth scales must be positive, got {s1} and {s2}"
        )));
    }
    if p == 0 {
        return Err(RkdError::InvalidInput("polynomial order must be at least 1".into()));
    }
    let k = basis_len(p);
    let reach = s1.min(s2);
    let norm = 1.0 / (s1 * s2).sqrt();
    let integrand = |u: f64, out: &mut [f64]| {
        let mut r1 = vec![0.0; k];
        let mut r2 = vec![0.0; k];
        fill_basis(p, u / s1, &mut r1);
        fill_basis(p, u / s2, &mut r2);
        let kk = kernel.eval(u / s1) * kernel.eval(u / s2);
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] = r1[i] * r2[j] * kk;
            }
        }
    };
    let mut acc = vec![0.0; k * k];
    if matches!(side, Side::Plus | Side::Full) {
        let v = quadrature::integrate(integrand, 0.0, reach, k * k, QUAD_TOL);
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    if matches!(side, Side::Minus | Side::Full) {
        let v = quadrature::integrate(integrand, -reach, 0.0, k * k, QUAD_TOL);
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok(DMatrix::from_fn(k, k, |i, j| norm * acc[i * k + j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_values() {
        assert_abs_diff_eq!(Kernel::Tricube.eval(0.0), 70.0 / 81.0, epsilon = 1e-15);
        assert_eq!(Kernel::Tricube.eval(1.5), 0.0);
        assert_eq!(Kernel::Uniform.eval(0.3), 0.5);
        assert_eq!(Kernel::Epanechnikov.eval(-1.0), 0.0);
    }

    #[test]
    fn mass_and_first_moment() {
        for k in Kernel::ALL {
            let f = |u: f64| k.eval(u);
            let mass = quadrature::integrate_scalar(f, -1.0, 0.0, 1e-12)
                + quadrature::integrate_scalar(f, 0.0, 1.0, 1e-12);
            assert!((mass - 1.0).abs() < 1e-8, "{k}: {mass}");
            let g = |u: f64| u * k.eval(u);
            let m1 = quadrature::integrate_scalar(g, -1.0, 0.0, 1e-12)
                + quadrature::integrate_scalar(g, 0.0, 1.0, 1e-12);
            assert!(m1.abs() < 1e-10);
        }
    }

    #[test]
    fn basis_examples() {
        assert_eq!(basis_vector(2, 0.5).unwrap(), vec![1.0, 0.5, 0.0, 0.25, 0.0]);
        assert_eq!(basis_vector(2, -0.5).unwrap(), vec![1.0, 0.0, -0.5, 0.0, 0.25]);
        assert_eq!(basis_vector(2, 0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(basis_vector(0, 0.1).is_err());
    }

    #[test]
    fn gaussian_is_rejected() {
        assert!("gaussian".parse::<Kernel>().is_err());
        assert_eq!("Tricube".parse::<Kernel>().unwrap(), Kernel::Tricube);
    }

    #[test]
    fn uniform_p1_closed_form() {
        let c = kernel_constants(Kernel::Uniform, 1, &[2]).unwrap();
        let expect = [
            [1.0, 0.25, -0.25],
            [0.25, 1.0 / 6.0, 0.0],
            [-0.25, 0.0, 1.0 / 6.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(c.gamma[(i, j)], expect[i][j], epsilon = 1e-12);
            }
        }
        // ϑ±_{1,2}: ∫_0^1 (1, u, 0) u^2 / 2 = (1/6, 1/8, 0)
        let tp = c.theta_plus(2).unwrap();
        let tm = c.theta_minus(2).unwrap();
        assert_abs_diff_eq!(tp[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tp[1], 1.0 / 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tm[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tm[2], -1.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn theta_mirror_symmetry() {
        for k in Kernel::ALL {
            let c = kernel_constants(k, 1, &[2, 3]).unwrap();
            for q in [2usize, 3] {
                let tp = c.theta_plus(q).unwrap();
                let tm = c.theta_minus(q).unwrap();
                let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
                assert_abs_diff_eq!(tp[0], sign * tm[0], epsilon = 1e-12);
                // odd-power slot picks up an extra sign flip under u -> -u
                assert_abs_diff_eq!(tp[1], -sign * tm[2], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constants_invariants() {
        for k in Kernel::ALL {
            for p in 1..=3 {
                let c = kernel_constants(k, p, &[0, p + 1]).unwrap();
                let eig = c.gamma.clone().symmetric_eigen();
                assert!(eig.eigenvalues.min() > 0.0);
                assert!((&c.gamma - c.gamma.transpose()).amax() < 1e-14);
                let diff = &c.psi_full - (&c.psi_plus + &c.psi_minus);
                assert!(diff.amax() < 1e-10);
                // ϑ⁺_q + ϑ⁻_q equals the full-line moment vector
                let full = quadrature::integrate(
                    |u, out| {
                        let mut r = vec![0.0; basis_len(p)];
                        fill_basis(p, u, &mut r);
                        for i in 0..r.len() {
                            out[i] = r[i] * u.powi(p as i32 + 1) * k.eval(u);
                        }
                    },
                    -1.0,
                    0.0,
                    basis_len(p),
                    1e-12,
                );
                let full2 = quadrature::integrate(
                    |u, out| {
                        let mut r = vec![0.0; basis_len(p)];
                        fill_basis(p, u, &mut r);
                        for i in 0..r.len() {
                            out[i] = r[i] * u.powi(p as i32 + 1) * k.eval(u);
                        }
                    },
                    0.0,
                    1.0,
                    basis_len(p),
                    1e-12,
                );
                let sum = c.theta_plus(p + 1).unwrap() + c.theta_minus(p + 1).unwrap();
                for i in 0..basis_len(p) {
                    assert!((sum[i] - full[i] - full2[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cross_matrix_unit_scales_match_psi() {
        for k in Kernel::ALL {
            let c = kernel_constants(k, 2, &[3]).unwrap();
            let m = cross_kernel_matrix(k, 2, 1.0, 1.0, Side::Full).unwrap();
            assert!((&m - &c.psi_full).amax() < 1e-10);
            // equal scales give Ψ regardless of the common scale
            let m = cross_kernel_matrix(k, 2, 0.37, 0.37, Side::Full).unwrap();
            assert!((&m - &c.psi_full).amax() < 1e-10);
        }
    }

    #[test]
    fn cross_matrix_uniform_plus_closed_form() {
        let m = cross_kernel_matrix(Kernel::Uniform, 1, 1.0, 1.0, Side::Plus).unwrap();
        let expect = [[0.25, 0.125, 0.0], [0.125, 1.0 / 12.0, 0.0], [0.0, 0.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(m[(i, j)], expect[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cross_matrix_rejects_bad_scales() {
        assert!(cross_kernel_matrix(Kernel::Tricube, 1, 0.0, 1.0, Side::Full).is_err());
        assert!(cross_kernel_matrix(Kernel::Tricube, 1, 1.0, -2.0, Side::Plus).is_err());
    }

    #[test]
    fn continuity_at_zero() {
        let alpha = [0.3, -1.2, 2.5, 0.7, -0.4];
        let eval = |u: f64| {
            basis_vector(2, u)
                .unwrap()
                .iter()
                .zip(&alpha)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        assert!((eval(1e-9) - eval(-1e-9)).abs() < 1e-8);
        assert_eq!(eval(0.0), alpha[0]);
    }

    #[test]
    fn cache_returns_same_values() {
        let a = KernelConstants::cached(Kernel::Tricube, 2).unwrap();
        let b = KernelConstants::cached(Kernel::Tricube, 2).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let fresh = kernel_constants(Kernel::Tricube, 2, &[3]).unwrap();
        assert_eq!(a.gamma, fresh.gamma);
    }
}
