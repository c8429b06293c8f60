//! Versioned JSON reports, plot CSV and the plain-text summary.

use std::fmt::Write as _;
use std::io::Write;

use rkd_core::estimands::{Baseline, EffectKind, KinkDesign};
use rkd_core::inference::TestResult;
use rkd_core::pipeline::{EffectReport, Selection};
use rkd_core::simulation::StudyReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ingest::RejectedRow;
use crate::CliError;

pub const REPORT_SCHEMA: &str = "rkd-report/1";
pub const STUDY_SCHEMA: &str = "rkd-study/1";

pub fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Test,
    Band,
    Bandwidth,
}

impl Command {
    pub fn needs_draws(self) -> bool {
        matches!(self, Command::Test | Command::Band)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectOutput {
    pub kind: EffectKind,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub baseline: Baseline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_hi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critical_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homogeneity: Option<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EffectOutput {
    pub fn new(command: Command, e: &EffectReport) -> Self {
        let c = &e.curve;
        let bands = matches!(command, Command::Estimate | Command::Band);
        let tests = command == Command::Test;
        EffectOutput {
            kind: c.kind,
            grid: c.grid.clone(),
            estimate: c.estimates.clone(),
            bandwidth: c.bandwidths.clone(),
            baseline: c.baseline.clone(),
            se: c.se.clone(),
            band_lo: c.band_lo.clone().filter(|_| bands),
            band_hi: c.band_hi.clone().filter(|_| bands),
            critical_value: e.critical_value.filter(|_| bands),
            significance: e.significance.filter(|_| tests),
            homogeneity: e.homogeneity.filter(|_| tests),
            selection: e.selection.clone(),
            warnings: e.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: String,
    pub command: Command,
    /// The complete configuration; re-running it reproduces `effects`.
    pub config: RunConfig,
    pub design: KinkDesign,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_rows: Vec<RejectedRow>,
    pub fx: f64,
    pub effects: Vec<EffectOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub schema: String,
    pub version: String,
    #[serde(flatten)]
    pub report: StudyReport,
}

/// Writes JSON to `path`, or to stdout when absent.
pub fn write_json<T: Serialize>(value: &T, path: Option<&std::path::Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub const PLOT_COLUMNS: [&str; 7] = ["effect", "grid", "estimate", "se", "band_lo", "band_hi", "bandwidth"];

/// One row per effect and grid point, in a fixed column order.
pub fn write_plot_csv(report: &Report, out: impl Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CliError::Io(std::io::Error::other(e));
    w.write_record(PLOT_COLUMNS).map_err(csv_err)?;
    let opt = |v: &Option<Vec<f64>>, j: usize| v.as_ref().map_or(String::new(), |v| v[j].to_string());
    for e in &report.effects {
        for j in 0..e.grid.len() {
            w.write_record([
                e.kind.name().to_string(),
                e.grid[j].to_string(),
                e.estimate[j].to_string(),
                opt(&e.se, j),
                opt(&e.band_lo, j),
                opt(&e.band_hi, j),
                e.bandwidth[j].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn grid_label(kind: EffectKind, g: f64) -> String {
    match kind {
        EffectKind::Mean => "x0".to_string(),
        EffectKind::Distributional => format!("y={g:.4}"),
        EffectKind::Quantile | EffectKind::Lorenz => format!("tau={g:.2}"),
    }
}

/// Estimates with standard errors in parentheses, then bands and tests.
pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n = {}, kink at {} (gap {})", report.n, report.design.x0, report.design.gap());
    if !report.rejected_rows.is_empty() {
        let lines: Vec<String> = report.rejected_rows.iter().map(|r| r.line.to_string()).collect();
        let _ = writeln!(s, "rejected input lines: {}", lines.join(", "));
    }
    for e in &report.effects {
        let _ = writeln!(s, "\n{} effect", e.kind.name());
        for j in 0..e.grid.len() {
            let mut row = format!("  {:<12} {:>10.4}", grid_label(e.kind, e.grid[j]), e.estimate[j]);
            if let Some(se) = &e.se {
                let _ = write!(row, " ({:.4})", se[j]);
            }
            if let (Some(lo), Some(hi)) = (&e.band_lo, &e.band_hi) {
                let _ = write!(row, "  [{:.4}, {:.4}]", lo[j], hi[j]);
            }
            let _ = write!(row, "  h={:.4}", e.bandwidth[j]);
            let _ = writeln!(s, "{row}");
        }
        for t in [&e.significance, &e.homogeneity].into_iter().flatten() {
            let _ = writeln!(
                s,
                "  {:?} test: stat {:.4}, critical {:.4}, p-value {:.4}, reject {}",
                t.kind, t.statistic, t.critical_value, t.p_value, t.reject
            );
        }
        for w in &e.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    s
}

/// Bias ratio, RMSE and coverage per effect, sample size and grid point.
pub fn study_summary(report: &StudyReport) -> String {
    let mut s = String::new();
    for t in &report.tables {
        let cov = t.coverage.map_or("-".to_string(), |c| format!("{c:.3}"));
        let _ = writeln!(
            s,
            "{} n={} ok={} failed={} uniform coverage={cov}",
            t.kind.name(),
            t.n,
            t.successes,
            t.failures
        );
        for j in 0..t.grid.len() {
            let _ = writeln!(
                s,
                "  {:<12} truth {:>9.4}  bias ratio {:>7.3}  rmse {:>7.3}",
                grid_label(t.kind, t.grid[j]),
                t.truth[j],
                t.bias_ratio[j],
                t.rmse[j]
            );
        }
    }
    s
}
