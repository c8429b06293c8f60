//! Simulated limiting processes, Kolmogorov–Smirnov tests and uniform bands.
//!
//! Every ensemble row draws its multipliers from its own ChaCha stream keyed
//! by `(master seed, domain, row)`, so ensembles are bit-identical whatever
//! the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::estimands::{indicator, integral_to, EffectCurve, EffectKind, KinkDesign};
use crate::kernel::{basis_len, fill_basis, Kernel, KernelConstants};
use crate::quadrature::trapezoid_mean;
use crate::regression::{residuals, ConstrainedFit, Sample};

const MULTIPLIER_DOMAIN: u64 = 1;
const PIVOTAL_DOMAIN: u64 = 2;

/// Default number of draws.
pub const DEFAULT_REPS: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Multiplier,
    Pivotal,
    LorenzComposite,
}

/// `reps × grid` matrix of simulated process values, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEnsemble {
    pub kind: EnsembleKind,
    pub grid: Vec<f64>,
    /// Bandwidth behind each column.
    pub bandwidths: Vec<f64>,
    /// Sample size of the data the processes were simulated from.
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub draws: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl BootstrapEnsemble {
    pub fn row(&self, b: usize) -> &[f64] {
        let m = self.grid.len();
        &self.draws[b * m..(b + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks(self.grid.len().max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    fn scale(&self, j: usize) -> f64 {
        (self.n as f64 * self.bandwidths[j].powi(3)).sqrt()
    }
}

/// Design matrix inside the influence weights of a simulated process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gram {
    /// `f_X(x0)·Γ̄`: the kernel constant scaled by the density at the kink.
    Population,
    /// `(1/(n h)) Σ K(u_i) r̄(u_i) r̄(u_i)ᵀ` over the window. It tends to the
    /// population form as `h → 0` and stays exact when the density of `X`
    /// varies across a wide window.
    #[default]
    Empirical,
}

/// Scalars shared by every point of a process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessSetup {
    pub x0: f64,
    pub gap: f64,
    pub fx: f64,
    pub kernel: Kernel,
    pub p: usize,
    pub gram: Gram,
}

impl ProcessSetup {
    pub fn new(design: &KinkDesign, fx: f64, kernel: Kernel, p: usize) -> Result<Self> {
        design.validate()?;
        if !(fx > 0.0 && fx.is_finite()) {
            return Err(RkdError::InvalidInput(format!("density at the kink must be positive, got {fx}")));
        }
        Ok(ProcessSetup {
            x0: design.x0,
            gap: design.gap(),
            fx,
            kernel,
            p,
            gram: Gram::default(),
        })
    }

    pub fn with_gram(self, gram: Gram) -> Self {
        ProcessSetup { gram, ..self }
    }
}

fn row_rng(seed: u64, domain: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) | row as u64);
    rng
}

/// Influence weights `(ι₂−ι₃)ᵀG⁻¹ r̄(u_i) K(u_i) / (gap · √(n h))` of the
/// observations inside the window, times `resid[i]` when given. `G` is
/// `f_X·Γ̄` or the window's own Gram matrix, depending on `s.gram`.
fn influence(x: &[f64], s: &ProcessSetup, h: f64, resid: Option<&[f64]>) -> Result<Vec<(usize, f64)>> {
    let k_len = basis_len(s.p);
    let nh = x.len() as f64 * h;
    let mut window = Vec::new();
    let mut buf = vec![0.0; k_len];
    for (i, &xi) in x.iter().enumerate() {
        let u = (xi - s.x0) / h;
        if u.abs() > 1.0 {
            continue;
        }
        let k = s.kernel.eval(u);
        if k == 0.0 {
            continue;
        }
        fill_basis(s.p, u, &mut buf);
        window.push((i, k, buf.clone()));
    }
    let w: DVector<f64> = match s.gram {
        Gram::Population => KernelConstants::cached(s.kernel, s.p)?.slope_gap_weights(1) / s.fx,
        Gram::Empirical => {
            let mut g = DMatrix::zeros(k_len, k_len);
            for (_, k, r) in &window {
                let r = DVector::from_column_slice(r);
                g.ger(*k / nh, &r, &r, 1.0);
            }
            let mut sel = DVector::zeros(k_len);
            sel[1] = 1.0;
            sel[2] = -1.0;
            g.cholesky()
                .ok_or(RkdError::IllConditioned { condition: f64::INFINITY })?
                .solve(&sel)
        }
    };
    let norm = 1.0 / (s.gap * nh.sqrt());
    Ok(window
        .into_iter()
        .filter_map(|(i, k, r)| {
            let e = resid.map_or(1.0, |res| res[i]);
            let dot: f64 = r.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            (e != 0.0).then_some((i, dot * k * e * norm))
        })
        .collect())
}

fn check_reps(reps: usize) -> Result<Vec<String>> {
    if reps < 2 {
        return Err(RkdError::InvalidInput(format!("need at least 2 draws, got {reps}")));
    }
    Ok(if reps < 100 {
        vec![format!("only {reps} draws; critical values will be unstable")]
    } else {
        Vec::new()
    })
}

/// One grid point of a multiplier process: its bandwidth and the residuals of
/// its fit, zero outside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPoint {
    pub h: f64,
    pub residuals: Vec<f64>,
}

fn multiplier_row(points: &[Vec<(usize, f64)>], xi: &[f64], out: &mut [f64]) {
    for (o, pts) in out.iter_mut().zip(points) {
        *o = pts.iter().map(|&(i, c)| c * xi[i]).sum();
    }
}

/// Multiplier-bootstrap draws of the process behind a Wald-type effect.
pub fn multiplier_draws(
    x: &[f64],
    setup: &ProcessSetup,
    grid: &[f64],
    points: &[ProcessPoint],
    reps: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    if points.len() != grid.len() {
        return Err(RkdError::LengthMismatch {
            expected: grid.len(),
            got: points.len(),
        });
    }
    let warnings = check_reps(reps)?;
    let n = x.len();
    let coefs: Vec<Vec<(usize, f64)>> = points
        .iter()
        .map(|pt| {
            if pt.residuals.len() != n {
                return Err(RkdError::LengthMismatch {
                    expected: n,
                    got: pt.residuals.len(),
                });
            }
            influence(x, setup, pt.h, Some(&pt.residuals))
        })
        .collect::<Result<_>>()?;
    let m = grid.len();
    let mut draws = vec![0.0; reps * m];
    draws.par_chunks_mut(m.max(1)).enumerate().for_each_init(
        || vec![0.0; n],
        |xi, (b, out)| {
            let mut rng = row_rng(seed, MULTIPLIER_DOMAIN, b);
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            multiplier_row(&coefs, xi, out);
        },
    );
    Ok(BootstrapEnsemble {
        kind: EnsembleKind::Multiplier,
        grid: grid.to_vec(),
        bandwidths: points.iter().map(|p| p.h).collect(),
        n,
        reps,
        master_seed: seed,
        draws,
        warnings,
    })
}

/// Residual-bearing process points for a mean or distributional curve.
pub fn curve_points(sample: &Sample, curve: &EffectCurve) -> Result<Vec<ProcessPoint>> {
    let fits: &[ConstrainedFit] = match curve.kind {
        EffectKind::Mean | EffectKind::Distributional => &curve.fits,
        EffectKind::Quantile | EffectKind::Lorenz => {
            return Err(RkdError::InvalidInput(format!(
                "{} curves are not driven by a multiplier process alone",
                curve.kind.name()
            )))
        }
    };
    if fits.is_empty() {
        return Err(RkdError::InvalidInput("curve carries no fits".into()));
    }
    fits.iter()
        .enumerate()
        .map(|(j, fit)| {
            let z = match curve.kind {
                EffectKind::Distributional => indicator(&sample.y, curve.grid[j]),
                _ => sample.y.clone(),
            };
            Ok(ProcessPoint {
                h: fit.h,
                residuals: residuals(fit, &z, &sample.x)?,
            })
        })
        .collect()
}

/// Multiplier draws aligned with a mean or distributional curve.
pub fn multiplier_for_curve(
    sample: &Sample,
    setup: &ProcessSetup,
    curve: &EffectCurve,
    reps: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    let points = curve_points(sample, curve)?;
    let mut ens = multiplier_draws(&sample.x, setup, &curve.grid, &points, reps, seed)?;
    ens.bandwidths = curve.bandwidths.clone();
    Ok(ens)
}

/// Grid points sharing one bandwidth: the influence weights of the window and
/// the grid columns they feed.
struct PivotalGroup {
    coefs: Vec<(usize, f64)>,
    total: f64,
    cols: Vec<usize>,
    taus: Vec<f64>,
}

fn pivotal_row(groups: &[PivotalGroup], fyx: &[f64], u: &[f64], out: &mut [f64], acc: &mut Vec<f64>) {
    for g in groups {
        // Σ_{U_i ≤ τ} c_i for every τ of the group via bucketed prefix sums.
        acc.clear();
        acc.resize(g.taus.len() + 1, 0.0);
        for &(i, c) in &g.coefs {
            let k = g.taus.partition_point(|&t| t < u[i]);
            acc[k] += c;
        }
        let mut below = 0.0;
        for (k, &col) in g.cols.iter().enumerate() {
            below += acc[k];
            let t = g.taus[k];
            out[col] = (t * g.total - below) / fyx[col];
        }
    }
}

/// Pivotal draws of the quantile process over `tau_grid`. Within a row one
/// vector of uniforms serves every level.
pub fn pivotal_draws(
    x: &[f64],
    setup: &ProcessSetup,
    tau_grid: &[f64],
    bandwidths: &[f64],
    fyx: &[f64],
    reps: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    let m = tau_grid.len();
    for v in [bandwidths.len(), fyx.len()] {
        if v != m {
            return Err(RkdError::LengthMismatch { expected: m, got: v });
        }
    }
    if tau_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RkdError::InvalidInput("quantile grid must be strictly increasing".into()));
    }
    for (t, f) in tau_grid.iter().zip(fyx) {
        if !(*f > 0.0 && f.is_finite()) {
            return Err(RkdError::PivotalDensity { tau: *t, density: *f });
        }
    }
    let warnings = check_reps(reps)?;
    let mut groups: Vec<PivotalGroup> = Vec::new();
    for (j, &h) in bandwidths.iter().enumerate() {
        match groups.iter_mut().find(|g| bandwidths[g.cols[0]].to_bits() == h.to_bits()) {
            Some(g) => {
                g.cols.push(j);
                g.taus.push(tau_grid[j]);
            }
            None => {
                let coefs = influence(x, setup, h, None)?;
                let total = coefs.iter().map(|c| c.1).sum();
                groups.push(PivotalGroup {
                    coefs,
                    total,
                    cols: vec![j],
                    taus: vec![tau_grid[j]],
                });
            }
        }
    }
    let n = x.len();
    let mut draws = vec![0.0; reps * m];
    draws.par_chunks_mut(m.max(1)).enumerate().for_each_init(
        || (vec![0.0; n], Vec::new()),
        |(u, acc), (b, out)| {
            let mut rng = row_rng(seed, PIVOTAL_DOMAIN, b);
            for v in u.iter_mut() {
                *v = rng.random::<f64>();
            }
            pivotal_row(&groups, fyx, u, out, acc);
        },
    );
    Ok(BootstrapEnsemble {
        kind: EnsembleKind::Pivotal,
        grid: tau_grid.to_vec(),
        bandwidths: bandwidths.to_vec(),
        n,
        reps,
        master_seed: seed,
        draws,
        warnings,
    })
}

/// Row-wise `(1/μ0)(∫_0^τ G^Q − L(τ)·G^μ)` over the integration grid of the
/// quantile ensemble.
pub fn lorenz_composite_draws(
    mean_ens: &BootstrapEnsemble,
    quantile_ens: &BootstrapEnsemble,
    mu0: f64,
    lorenz: &[f64],
    tau_grid: &[f64],
    bandwidths: &[f64],
) -> Result<BootstrapEnsemble> {
    if mean_ens.reps != quantile_ens.reps {
        return Err(RkdError::LengthMismatch {
            expected: quantile_ens.reps,
            got: mean_ens.reps,
        });
    }
    if mean_ens.grid.len() != 1 {
        return Err(RkdError::InvalidInput("mean ensemble must have a single column".into()));
    }
    for v in [lorenz.len(), bandwidths.len()] {
        if v != tau_grid.len() {
            return Err(RkdError::LengthMismatch {
                expected: tau_grid.len(),
                got: v,
            });
        }
    }
    if !(mu0 > 0.0) {
        return Err(RkdError::NonpositiveMean { mu0 });
    }
    let u = &quantile_ens.grid;
    let mut draws = Vec::with_capacity(quantile_ens.reps * tau_grid.len());
    for (q, m) in quantile_ens.rows().zip(mean_ens.rows()) {
        for (&t, &l) in tau_grid.iter().zip(lorenz) {
            draws.push((integral_to(u, q, t) - l * m[0]) / mu0);
        }
    }
    let mut warnings = mean_ens.warnings.clone();
    warnings.extend(quantile_ens.warnings.iter().cloned());
    warnings.dedup();
    Ok(BootstrapEnsemble {
        kind: EnsembleKind::LorenzComposite,
        grid: tau_grid.to_vec(),
        bandwidths: bandwidths.to_vec(),
        n: quantile_ens.n,
        reps: quantile_ens.reps,
        master_seed: quantile_ens.master_seed,
        draws,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Significance,
    Homogeneity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub level: f64,
    pub reject: bool,
}

fn check_alignment(curve: &EffectCurve, ens: &BootstrapEnsemble) -> Result<()> {
    let same = |a: &[f64], b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
    };
    if !same(&curve.grid, &ens.grid) {
        return Err(RkdError::InvalidInput("curve and ensemble grids differ".into()));
    }
    if !same(&curve.bandwidths, &ens.bandwidths) {
        return Err(RkdError::InvalidInput("curve and ensemble bandwidths differ".into()));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(RkdError::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

/// Empirical quantile of type "higher": the `⌈prob·B⌉`-th order statistic.
pub fn higher_quantile(values: &[f64], prob: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((prob * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

fn sup_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |a, x| a.max(x.abs()))
}

fn centered(grid: &[f64], v: &[f64]) -> Vec<f64> {
    let m = trapezoid_mean(grid, v);
    v.iter().map(|x| x - m).collect()
}

fn ks_test(kind: TestKind, stat: f64, sups: &[f64], level: f64) -> TestResult {
    let critical_value = higher_quantile(sups, 1.0 - level);
    let p_value = sups.iter().filter(|&&s| s > stat).count() as f64 / sups.len() as f64;
    TestResult {
        kind,
        statistic: stat,
        critical_value,
        p_value,
        level,
        reject: stat > critical_value,
    }
}

/// `sup |√(n h³)·Δ̂|` against the row-wise sup of `|draws|`.
pub fn significance_test(curve: &EffectCurve, ens: &BootstrapEnsemble, level: f64) -> Result<TestResult> {
    check_alignment(curve, ens)?;
    check_level(level)?;
    let stat = sup_abs(curve.estimates.iter().enumerate().map(|(j, e)| ens.scale(j) * e));
    let sups: Vec<f64> = ens.rows().map(|r| sup_abs(r.iter().copied())).collect();
    Ok(ks_test(TestKind::Significance, stat, &sups, level))
}

/// Sup-deviation of the curve from its grid average, against draws centred
/// the same way.
pub fn homogeneity_test(curve: &EffectCurve, ens: &BootstrapEnsemble, level: f64) -> Result<TestResult> {
    check_alignment(curve, ens)?;
    check_level(level)?;
    let dev = centered(&curve.grid, &curve.estimates);
    let stat = sup_abs(dev.iter().enumerate().map(|(j, e)| ens.scale(j) * e));
    let sups: Vec<f64> = ens
        .rows()
        .map(|r| sup_abs(centered(&ens.grid, r).into_iter()))
        .collect();
    Ok(ks_test(TestKind::Homogeneity, stat, &sups, level))
}

/// Fills the uniform band `Δ̂ ± ĉ(1−λ)/√(n h³)` and returns the critical value.
pub fn uniform_band(curve: &mut EffectCurve, ens: &BootstrapEnsemble, level: f64) -> Result<f64> {
    check_alignment(curve, ens)?;
    check_level(level)?;
    let sups: Vec<f64> = ens.rows().map(|r| sup_abs(r.iter().copied())).collect();
    let c = higher_quantile(&sups, 1.0 - level);
    let half: Vec<f64> = (0..curve.grid.len()).map(|j| c / ens.scale(j)).collect();
    curve.band_lo = Some(curve.estimates.iter().zip(&half).map(|(e, w)| e - w).collect());
    curve.band_hi = Some(curve.estimates.iter().zip(&half).map(|(e, w)| e + w).collect());
    Ok(c)
}

/// Standard deviation of the draws at each point over `√(n h³)`.
pub fn pointwise_se(ens: &BootstrapEnsemble) -> Result<Vec<f64>> {
    if ens.reps < 2 {
        return Err(RkdError::InvalidInput("standard errors need at least 2 draws".into()));
    }
    Ok((0..ens.grid.len())
        .map(|j| crate::density::sample_sd(&ens.column(j)) / ens.scale(j))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> ProcessSetup {
        ProcessSetup::new(&KinkDesign::new(0.0, -1.0, 1.0).unwrap(), 1.5, Kernel::Tricube, 2).unwrap()
    }

    fn xs(n: usize) -> Vec<f64> {
        (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect()
    }

    fn ensemble(rows: Vec<Vec<f64>>, grid: Vec<f64>, h: f64, n: usize) -> BootstrapEnsemble {
        BootstrapEnsemble {
            kind: EnsembleKind::Multiplier,
            bandwidths: vec![h; grid.len()],
            grid,
            n,
            reps: rows.len(),
            master_seed: 0,
            draws: rows.concat(),
            warnings: vec![],
        }
    }

    fn curve(est: Vec<f64>, grid: Vec<f64>, h: f64) -> EffectCurve {
        let mut c = crate::estimands::rkd_mean(
            &Sample::new(xs(50).iter().map(|x| x * x).collect(), xs(50)).unwrap(),
            &KinkDesign::new(0.0, -1.0, 1.0).unwrap(),
            1,
            0.9,
            Kernel::Tricube,
        )
        .unwrap();
        c.bandwidths = vec![h; grid.len()];
        c.grid = grid;
        c.estimates = est;
        c
    }

    #[test]
    fn zero_residuals_give_zero_draws() {
        let x = xs(200);
        let pts = vec![ProcessPoint { h: 0.5, residuals: vec![0.0; 200] }];
        let e = multiplier_draws(&x, &setup(), &[0.0], &pts, 50, 1).unwrap();
        assert!(e.draws.iter().all(|v| *v == 0.0));
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn zero_multipliers_give_zero_row() {
        let x = xs(100);
        let c = vec![influence(&x, &setup(), 0.5, Some(&vec![1.0; 100])).unwrap()];
        let mut out = [1.0];
        multiplier_row(&c, &[0.0; 100], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn multiplier_matches_direct_sum() {
        let x = xs(300);
        let s = setup().with_gram(Gram::Population);
        let resid: Vec<f64> = x.iter().map(|v| if v.abs() <= 0.4 { (7.0 * v).sin() } else { 0.0 }).collect();
        let pts = vec![ProcessPoint { h: 0.4, residuals: resid.clone() }];
        let e = multiplier_draws(&x, &s, &[0.0], &pts, 3, 42).unwrap();
        let consts = KernelConstants::cached(Kernel::Tricube, 2).unwrap();
        let w = consts.slope_gap_weights(1);
        for b in 0..3 {
            let mut rng = row_rng(42, MULTIPLIER_DOMAIN, b);
            let xi: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
            let mut direct = 0.0;
            for i in 0..300 {
                let u = x[i] / 0.4;
                if u.abs() > 1.0 {
                    continue;
                }
                let r = crate::kernel::basis_vector(2, u).unwrap();
                let d: f64 = r.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                direct += xi[i] * d * Kernel::Tricube.eval(u) * resid[i];
            }
            direct /= 2.0 * 1.5 * (300.0f64 * 0.4).sqrt();
            assert!((e.row(b)[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_weights_reproduce_the_estimate() {
        // Σ c_i y_i = √(n h³)·Δ̂ exactly for the local fit at the same h.
        let x = xs(400);
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin() + v.abs() + 0.3 * (11.0 * v).cos()).collect();
        let d = KinkDesign::new(0.0, -1.0, 1.0).unwrap();
        let sample = Sample::new(y.clone(), x.clone()).unwrap();
        let h = 0.45;
        let est = crate::estimands::rkd_mean(&sample, &d, 2, h, Kernel::Tricube).unwrap().estimates[0];
        let c = influence(&x, &setup(), h, None).unwrap();
        let sum: f64 = c.iter().map(|&(i, w)| w * y[i]).sum();
        let want = (400.0 * h.powi(3)).sqrt() * est;
        assert!((sum - want).abs() < 1e-9 * want.abs().max(1.0), "{sum} vs {want}");
    }

    #[test]
    fn empirical_and_population_agree_on_a_uniform_design() {
        // On an evenly spaced design the density is flat, so the window Gram
        // is f_X·Γ̄ up to discretisation.
        let x = xs(20_000);
        let s = ProcessSetup::new(&KinkDesign::new(0.0, -1.0, 1.0).unwrap(), 0.5, Kernel::Tricube, 2).unwrap();
        let a = influence(&x, &s.with_gram(Gram::Empirical), 0.3, None).unwrap();
        let b = influence(&x, &s.with_gram(Gram::Population), 0.3, None).unwrap();
        let worst = a.iter().zip(&b).map(|(p, q)| (p.1 - q.1).abs()).fold(0.0, f64::max);
        let scale = b.iter().map(|q| q.1.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn pivotal_antisymmetric_uniforms_cancel_at_median() {
        let x = xs(200);
        let coefs = influence(&x, &setup(), 0.6, None).unwrap();
        let total = coefs.iter().map(|c| c.1).sum();
        let g = PivotalGroup { coefs, total, cols: vec![0], taus: vec![0.5] };
        // pairs (v, 1 − v) within each observation's own weight: give every
        // observation a twin by repeating the weight with a mirrored uniform
        let mut dup = Vec::new();
        let mut u = vec![0.0; 400];
        for (k, &(i, c)) in g.coefs.iter().enumerate() {
            let v = 0.1 + 0.35 * (k as f64 * 0.37).fract();
            dup.push((i, c));
            dup.push((200 + i, c));
            u[i] = v;
            u[200 + i] = 1.0 - v;
        }
        let g = PivotalGroup { total: 2.0 * g.total, coefs: dup, ..g };
        let mut out = [9.0];
        pivotal_row(&[g], &[1.0], &u, &mut out, &mut Vec::new());
        assert!(out[0].abs() < 1e-12, "{}", out[0]);
    }

    #[test]
    fn pivotal_bucketing_matches_direct() {
        let x = xs(400);
        let s = setup();
        let taus = [0.1, 0.3, 0.5, 0.9];
        let hs = [0.5, 0.3, 0.5, 0.5];
        let f = [1.0, 2.0, 3.0, 0.5];
        let e = pivotal_draws(&x, &s, &taus, &hs, &f, 4, 3).unwrap();
        for b in 0..4 {
            let mut rng = row_rng(3, PIVOTAL_DOMAIN, b);
            let u: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
            for j in 0..4 {
                let c = influence(&x, &s, hs[j], None).unwrap();
                let d: f64 = c.iter().map(|&(i, ci)| ci * (taus[j] - if u[i] <= taus[j] { 1.0 } else { 0.0 })).sum::<f64>() / f[j];
                assert!((e.row(b)[j] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pivotal_mean_is_zero() {
        let x = xs(500);
        let e = pivotal_draws(&x, &setup(), &[0.3], &[0.5], &[1.0], 4000, 8).unwrap();
        let col = e.column(0);
        let m = crate::density::mean(&col);
        let sd = crate::density::sample_sd(&col);
        assert!(m.abs() < 3.0 * sd / (4000f64).sqrt());
    }

    #[test]
    fn pivotal_rejects_bad_density() {
        let err = pivotal_draws(&xs(100), &setup(), &[0.2, 0.4], &[0.5, 0.5], &[1.0, 0.0], 10, 0).unwrap_err();
        assert_eq!(err, RkdError::PivotalDensity { tau: 0.4, density: 0.0 });
    }

    #[test]
    fn composite_is_linear_and_vanishes() {
        let u: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        let q = ensemble(vec![u.iter().map(|t| t.sin()).collect(), vec![1.0; 99]], u.clone(), 0.3, 100);
        let m = ensemble(vec![vec![0.7], vec![-2.0]], vec![0.0], 0.3, 100);
        let taus = [0.0, 0.5, 0.9];
        let l = [0.0, 0.3, 0.8];
        let a = lorenz_composite_draws(&m, &q, 2.0, &l, &taus, &[0.3; 3]).unwrap();
        assert_eq!(a.row(0)[0], 0.0);
        let q2 = BootstrapEnsemble { draws: q.draws.iter().map(|v| 2.0 * v).collect(), ..q.clone() };
        let m2 = BootstrapEnsemble { draws: m.draws.iter().map(|v| 2.0 * v).collect(), ..m.clone() };
        let b = lorenz_composite_draws(&m2, &q2, 2.0, &l, &taus, &[0.3; 3]).unwrap();
        for (x, y) in a.draws.iter().zip(&b.draws) {
            assert_eq!(2.0 * x, *y);
        }
        let zq = BootstrapEnsemble { draws: vec![0.0; q.draws.len()], ..q.clone() };
        let zm = BootstrapEnsemble { draws: vec![0.0; 2], ..m.clone() };
        let z = lorenz_composite_draws(&zm, &zq, 2.0, &l, &taus, &[0.3; 3]).unwrap();
        assert!(z.draws.iter().all(|v| *v == 0.0));
        let short = ensemble(vec![vec![0.0]], vec![0.0], 0.3, 100);
        assert!(lorenz_composite_draws(&short, &q, 2.0, &l, &taus, &[0.3; 3]).is_err());
    }

    #[test]
    fn tests_on_trivial_inputs() {
        let grid = vec![0.2, 0.5, 0.8];
        let rows: Vec<Vec<f64>> = (0..200).map(|b| vec![(b as f64 * 0.1).sin(), 0.3, -0.2]).collect();
        let ens = ensemble(rows, grid.clone(), 0.4, 1000);
        let zero = curve(vec![0.0; 3], grid.clone(), 0.4);
        let t = significance_test(&zero, &ens, 0.05).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let flat = ensemble(vec![vec![0.0; 3]; 50], grid.clone(), 0.4, 1000);
        let c = curve(vec![0.1, 0.2, 0.3], grid.clone(), 0.4);
        assert_eq!(significance_test(&c, &flat, 0.05).unwrap().p_value, 0.0);
        let konst = curve(vec![0.4; 3], grid.clone(), 0.4);
        assert!(homogeneity_test(&konst, &ens, 0.05).unwrap().statistic < 1e-12);
        let shifted_c = curve(vec![1.1, 1.2, 1.3], grid.clone(), 0.4);
        let shifted_e = BootstrapEnsemble { draws: ens.draws.iter().map(|v| v + 5.0).collect(), ..ens.clone() };
        let a = homogeneity_test(&c, &ens, 0.05).unwrap();
        let b = homogeneity_test(&shifted_c, &shifted_e, 0.05).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-12 && (a.critical_value - b.critical_value).abs() < 1e-12);
        assert_eq!(a.p_value, b.p_value);
        let wrong = curve(vec![0.0; 2], vec![0.2, 0.5], 0.4);
        assert!(significance_test(&wrong, &ens, 0.05).is_err());
    }

    #[test]
    fn band_limits_and_se() {
        let grid = vec![0.2, 0.5];
        let rows: Vec<Vec<f64>> = (0..100).map(|b| vec![(b as f64).cos(), 2.0 * (b as f64).sin()]).collect();
        let ens = ensemble(rows.clone(), grid.clone(), 0.25, 400);
        let mut c = curve(vec![0.5, -0.5], grid.clone(), 0.25);
        let cmin = uniform_band(&mut c, &ens, 1.0 - 1e-9).unwrap();
        let sups: Vec<f64> = rows.iter().map(|r| r[0].abs().max(r[1].abs())).collect();
        assert_eq!(cmin, sups.iter().cloned().fold(f64::INFINITY, f64::min));
        let zero = ensemble(vec![vec![0.0; 2]; 10], grid.clone(), 0.25, 400);
        uniform_band(&mut c, &zero, 0.05).unwrap();
        assert_eq!(c.band_lo.as_ref().unwrap(), &c.estimates);
        assert!(pointwise_se(&zero).unwrap().iter().all(|s| *s == 0.0));
        let se = pointwise_se(&ens).unwrap();
        let scaled = BootstrapEnsemble { draws: ens.draws.iter().map(|v| -3.0 * v).collect(), ..ens.clone() };
        for (a, b) in se.iter().zip(pointwise_se(&scaled).unwrap()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_quantile_uses_ceiling_index() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(higher_quantile(&v, 0.95), 19.0);
        assert_eq!(higher_quantile(&v, 0.951), 20.0);
        assert_eq!(higher_quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn draws_do_not_depend_on_thread_count() {
        let x = xs(500);
        let pts = vec![ProcessPoint { h: 0.3, residuals: x.iter().map(|v| v.cos()).collect() }];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| multiplier_draws(&x, &setup(), &[0.0], &pts, 300, 11).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
