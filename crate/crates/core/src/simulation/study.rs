use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_dgp, true_effects, true_quantile, DgpConfig};
use crate::error::{Result, RkdError};
use crate::estimands::EffectKind;
use crate::pipeline::{analyze, AnalysisConfig, BandwidthOverrides, YGrid};

/// How bandwidths are chosen in each replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BandwidthMode {
    /// Plug-in selection per effect.
    PlugIn,
    /// One fixed bandwidth for every effect.
    Fixed { h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub effects: Vec<EffectKind>,
    pub n_list: Vec<usize>,
    pub reps: usize,
    /// Process draws per replication; zero skips bands and coverage.
    pub boot: usize,
    pub seed: u64,
    pub bandwidth_mode: BandwidthMode,
    /// Orders, kernel, grids and level; its draw count and seed are
    /// replaced per replication.
    pub analysis: AnalysisConfig,
    /// Worker threads; `None` uses the global pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dgp: DgpConfig::default(),
            effects: EffectKind::ALL.to_vec(),
            n_list: vec![1000, 2000, 4000],
            reps: 500,
            boot: 500,
            seed: 0,
            bandwidth_mode: BandwidthMode::PlugIn,
            analysis: AnalysisConfig {
                y_grid: YGrid::AtQuantiles,
                ..Default::default()
            },
            workers: None,
        }
    }
}

/// Aggregates for one effect at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub kind: EffectKind,
    pub n: usize,
    /// Reporting grid: quantile levels, or outcome values for a distributional
    /// effect on an explicit outcome grid.
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    pub median_estimate: Vec<f64>,
    /// `|mean − truth| / |truth|`, or the absolute bias where the truth is
    /// numerically zero (flagged in `absolute_bias_at`).
    pub bias_ratio: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub absolute_bias_at: Vec<usize>,
    pub rmse: Vec<f64>,
    /// Share of replications whose band covers the truth at every point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub successes: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failure_messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub elapsed_seconds: Vec<f64>,
    pub workers: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub tables: Vec<EffectTable>,
    pub notes: Vec<String>,
    /// Timing and environment; excluded from reproducibility comparisons.
    pub meta: StudyMeta,
}

impl StudyReport {
    pub fn table(&self, kind: EffectKind, n: usize) -> Option<&EffectTable> {
        self.tables.iter().find(|t| t.kind == kind && t.n == n)
    }

    /// Equality of everything except timing metadata and the worker count.
    pub fn same_results(&self, other: &StudyReport) -> bool {
        let strip = |c: &StudyConfig| StudyConfig { workers: None, ..c.clone() };
        strip(&self.config) == strip(&other.config) && self.tables == other.tables && self.notes == other.notes
    }
}

/// Seed of replication `rep` at sample size `n`.
pub fn replication_seed(master: u64, n: usize, rep: usize) -> u64 {
    // splitmix64 finalizer over a mix of the three inputs
    let mut z = master
        .wrapping_add((n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((rep as u64).wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of one effect in one replication.
#[derive(Debug, Clone, PartialEq)]
enum Draw {
    Ok { estimates: Vec<f64>, covered: Option<bool> },
    Failed(String),
}

fn covered(lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>, truth: &[f64]) -> Option<bool> {
    match (lo, hi) {
        (Some(lo), Some(hi)) => Some(truth.iter().zip(lo.iter().zip(hi)).all(|(t, (l, h))| l <= t && t <= h)),
        _ => None,
    }
}

struct Truths {
    grids: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn truths(cfg: &StudyConfig) -> Truths {
    let a = &cfg.analysis;
    let mut grids = Vec::new();
    let mut values = Vec::new();
    for &k in &cfg.effects {
        let (grid, truth) = match k {
            EffectKind::Mean => (vec![cfg.dgp.design().x0], true_effects(&cfg.dgp, k, &[0.0])),
            EffectKind::Quantile | EffectKind::Lorenz => (a.tau_grid.clone(), true_effects(&cfg.dgp, k, &a.tau_grid)),
            EffectKind::Distributional => match &a.y_grid {
                YGrid::AtQuantiles => {
                    let ys: Vec<f64> = a.tau_grid.iter().map(|&t| true_quantile(&cfg.dgp, t)).collect();
                    (a.tau_grid.clone(), true_effects(&cfg.dgp, k, &ys))
                }
                YGrid::Values(v) => (v.clone(), true_effects(&cfg.dgp, k, v)),
            },
        };
        grids.push(grid);
        values.push(truth);
    }
    Truths { grids, values }
}

fn replicate(cfg: &StudyConfig, n: usize, rep: usize, truth: &Truths) -> Vec<Draw> {
    let seed = replication_seed(cfg.seed, n, rep);
    let mut acfg = cfg.analysis.clone();
    acfg.reps = cfg.boot;
    acfg.seed = seed;
    if let BandwidthMode::Fixed { h } = cfg.bandwidth_mode {
        acfg.overrides = BandwidthOverrides::all(h);
    }
    let dgp = DgpConfig { n, seed, ..cfg.dgp };
    let sample = match generate_dgp(&dgp) {
        Ok(s) => s,
        Err(e) => return vec![Draw::Failed(e.to_string()); cfg.effects.len()],
    };
    let design = dgp.design();
    let run = |effects: &[EffectKind]| analyze(&sample, &design, effects, &acfg);
    let to_draw = |rep: &crate::pipeline::EffectReport, t: &[f64]| Draw::Ok {
        estimates: rep.curve.estimates.clone(),
        covered: covered(&rep.curve.band_lo, &rep.curve.band_hi, t),
    };
    match run(&cfg.effects) {
        Ok(a) => a
            .effects
            .iter()
            .zip(&truth.values)
            .map(|(r, t)| to_draw(r, t))
            .collect(),
        // attribute the failure by rerunning each effect on its own
        Err(_) => cfg
            .effects
            .iter()
            .zip(&truth.values)
            .map(|(&k, t)| match run(&[k]) {
                Ok(a) => to_draw(&a.effects[0], t),
                Err(e) => Draw::Failed(e.to_string()),
            })
            .collect(),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn aggregate(kind: EffectKind, n: usize, grid: &[f64], truth: &[f64], draws: &[&Draw]) -> EffectTable {
    let ok: Vec<(&Vec<f64>, Option<bool>)> = draws
        .iter()
        .filter_map(|d| match d {
            Draw::Ok { estimates, covered } => Some((estimates, *covered)),
            Draw::Failed(_) => None,
        })
        .collect();
    let mut failure_messages: Vec<String> = draws
        .iter()
        .filter_map(|d| match d {
            Draw::Failed(m) => Some(m.clone()),
            _ => None,
        })
        .collect();
    let failures = failure_messages.len();
    failure_messages.sort();
    failure_messages.dedup();
    let s = ok.len() as f64;
    let m = grid.len();
    let mut mean_estimate = vec![0.0; m];
    let mut rmse = vec![0.0; m];
    let mut median_estimate = vec![0.0; m];
    for j in 0..m {
        let mut col: Vec<f64> = ok.iter().map(|(e, _)| e[j]).collect();
        mean_estimate[j] = col.iter().sum::<f64>() / s;
        rmse[j] = (col.iter().map(|e| (e - truth[j]).powi(2)).sum::<f64>() / s).sqrt();
        median_estimate[j] = median(&mut col);
    }
    let mut absolute_bias_at = Vec::new();
    let bias_ratio = (0..m)
        .map(|j| {
            let b = (mean_estimate[j] - truth[j]).abs();
            if truth[j].abs() < 1e-8 {
                absolute_bias_at.push(j);
                b
            } else {
                b / truth[j].abs()
            }
        })
        .collect();
    let flags: Vec<bool> = ok.iter().filter_map(|(_, c)| *c).collect();
    let coverage = if flags.is_empty() {
        None
    } else {
        Some(flags.iter().filter(|c| **c).count() as f64 / flags.len() as f64)
    };
    EffectTable {
        kind,
        n,
        grid: grid.to_vec(),
        truth: truth.to_vec(),
        mean_estimate,
        median_estimate,
        bias_ratio,
        absolute_bias_at,
        rmse,
        coverage,
        successes: ok.len(),
        failures,
        failure_messages,
    }
}

/// Runs the Monte Carlo study: for each sample size, `reps` fresh samples are
/// drawn, analysed and compared against the analytic effects.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.dgp.validate()?;
    cfg.analysis.validate()?;
    if cfg.effects.is_empty() || cfg.n_list.is_empty() || cfg.reps == 0 {
        return Err(RkdError::InvalidInput("study needs effects, sample sizes and replications".into()));
    }
    if cfg.boot == 1 {
        return Err(RkdError::InvalidInput("inference needs at least 2 draws".into()));
    }
    if let BandwidthMode::Fixed { h } = cfg.bandwidth_mode {
        if !(h > 0.0 && h.is_finite()) {
            return Err(RkdError::InvalidInput(format!("fixed bandwidth {h} must be positive")));
        }
    }
    let pool = match cfg.workers {
        Some(w) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| RkdError::InvalidInput(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let truth = truths(cfg);
    let mut notes = Vec::new();
    if cfg.reps < 50 {
        notes.push(format!("only {} replications; coverage estimates are unstable", cfg.reps));
    }
    notes.push(match cfg.bandwidth_mode {
        BandwidthMode::PlugIn => "bandwidths: plug-in per effect; results depend on this choice".to_string(),
        BandwidthMode::Fixed { h } => format!("bandwidths: fixed at {h} for every effect"),
    });
    if cfg.effects.contains(&EffectKind::Distributional) && cfg.analysis.y_grid == YGrid::AtQuantiles {
        notes.push("distributional effect estimated at fitted quantiles, truth taken at true quantiles".into());
    }

    let mut tables = Vec::new();
    let mut elapsed = Vec::new();
    for &n in &cfg.n_list {
        let start = Instant::now();
        let work = || -> Vec<Vec<Draw>> { (0..cfg.reps).into_par_iter().map(|r| replicate(cfg, n, r, &truth)).collect() };
        let per_rep = match &pool {
            Some(p) => p.install(work),
            None => work(),
        };
        elapsed.push(start.elapsed().as_secs_f64());
        for (e, &kind) in cfg.effects.iter().enumerate() {
            let draws: Vec<&Draw> = per_rep.iter().map(|r| &r[e]).collect();
            tables.push(aggregate(kind, n, &truth.grids[e], &truth.values[e], &draws));
        }
    }
    Ok(StudyReport {
        config: cfg.clone(),
        tables,
        notes,
        meta: StudyMeta {
            elapsed_seconds: elapsed,
            workers: pool.as_ref().map_or_else(rayon::current_num_threads, |p| p.current_num_threads()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> StudyConfig {
        StudyConfig {
            effects: vec![EffectKind::Mean, EffectKind::Quantile],
            n_list: vec![600],
            reps: 6,
            boot: 50,
            seed: 3,
            analysis: AnalysisConfig {
                tau_grid: vec![0.25, 0.5, 0.75],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let mut s: Vec<u64> = (0..1000).map(|r| replication_seed(7, 2000, r)).collect();
        s.extend((0..1000).map(|r| replication_seed(7, 4000, r)));
        let len = s.len();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), len);
    }

    #[test]
    fn aggregate_arithmetic() {
        let d = [
            Draw::Ok { estimates: vec![1.0, 0.0], covered: Some(true) },
            Draw::Ok { estimates: vec![3.0, 0.2], covered: Some(false) },
            Draw::Failed("boom".into()),
        ];
        let refs: Vec<&Draw> = d.iter().collect();
        let t = aggregate(EffectKind::Quantile, 10, &[0.2, 0.5], &[1.0, 0.0], &refs);
        assert_eq!(t.mean_estimate, vec![2.0, 0.1]);
        assert_eq!(t.bias_ratio[0], 1.0);
        assert!((t.bias_ratio[1] - 0.1).abs() < 1e-15);
        assert_eq!(t.absolute_bias_at, vec![1]);
        assert!((t.rmse[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.coverage, Some(0.5));
        assert_eq!((t.successes, t.failures), (2, 1));
        for j in 0..2 {
            assert!(t.rmse[j] >= (t.mean_estimate[j] - t.truth[j]).abs());
        }
    }

    #[test]
    fn study_is_reproducible_and_sane() {
        let a = run_study(&tiny()).unwrap();
        let b = run_study(&StudyConfig { workers: Some(2), ..tiny() }).unwrap();
        assert!(a.same_results(&b));
        assert_eq!(a.tables.len(), 2);
        for t in &a.tables {
            assert_eq!(t.successes + t.failures, 6);
            let c = t.coverage.unwrap();
            assert!((0.0..=1.0).contains(&c));
        }
        assert!(a.notes.iter().any(|n| n.contains("unstable")));
    }

    #[test]
    fn fixed_mode_and_validation() {
        let cfg = StudyConfig {
            bandwidth_mode: BandwidthMode::Fixed { h: 0.3 },
            boot: 0,
            ..tiny()
        };
        let r = run_study(&cfg).unwrap();
        assert!(r.tables.iter().all(|t| t.coverage.is_none()));
        assert!(run_study(&StudyConfig { reps: 0, ..tiny() }).is_err());
        assert!(run_study(&StudyConfig { bandwidth_mode: BandwidthMode::Fixed { h: 0.0 }, ..tiny() }).is_err());
    }
}
