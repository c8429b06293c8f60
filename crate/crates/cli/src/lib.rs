//! Command-line front end: ingestion, configuration, analysis commands and
//! the simulation runner.

pub mod config;
pub mod ingest;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rkd_core::estimands::EffectKind;
use rkd_core::pipeline::{analyze, BandwidthOverrides};
use rkd_core::simulation::{run_study, BandwidthMode, StudyConfig};
use rkd_core::{Kernel, RkdError};
use thiserror::Error;

pub use config::{CapRule, ColumnMap, KinkSpec, RunConfig};
pub use report::{Command, Report, StudyOutput};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "RKD_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] RkdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration or input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rkd", version, about = "Local treatment effects in regression kink designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Point estimates, standard errors and uniform bands.
    Estimate(RunArgs),
    /// Significance and homogeneity tests.
    Test(RunArgs),
    /// Uniform confidence bands, with plot data.
    Band(RunArgs),
    /// Plug-in bandwidths only.
    Bandwidth(RunArgs),
    /// Monte Carlo study on the built-in design.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-delimited data file with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub x_col: Option<String>,
    #[arg(long)]
    pub b_col: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub slope_left: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub slope_right: Option<f64>,
    /// Treatment rule `min(a*x, cap)`; replaces x0 and the slopes.
    #[arg(long)]
    pub rule: Option<String>,
    /// Effects to estimate (mean, distributional, quantile, lorenz).
    #[arg(long, value_delimiter = ',')]
    pub effect: Vec<EffectKind>,
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Vec<f64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub kernel: Option<Kernel>,
    /// Simulated process draws.
    #[arg(long)]
    pub boot: Option<usize>,
    /// Significance level of tests and bands.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One fixed bandwidth for every effect instead of the plug-in rule.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot CSV path.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Suppress the summary on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// JSON study configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub effect: Vec<EffectKind>,
    /// One fixed bandwidth instead of the plug-in rule.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

fn read_text(path: &std::path::Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

impl RunArgs {
    /// The configuration file, if any, with flags applied on top.
    pub fn to_config(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json(&read_text(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            c.input = Some(v.clone());
        }
        if let Some(v) = &self.y_col {
            c.columns.y = v.clone();
        }
        if let Some(v) = &self.x_col {
            c.columns.x = v.clone();
        }
        if let Some(v) = &self.b_col {
            c.columns.b = Some(v.clone());
        }
        if let Some(r) = &self.rule {
            c.kink = KinkSpec {
                rule: Some(r.clone()),
                ..Default::default()
            };
        }
        if self.x0.is_some() || self.slope_left.is_some() || self.slope_right.is_some() {
            c.kink.rule = None;
            c.kink.x0 = self.x0.or(c.kink.x0);
            c.kink.slope_left = self.slope_left.or(c.kink.slope_left);
            c.kink.slope_right = self.slope_right.or(c.kink.slope_right);
        }
        if !self.effect.is_empty() {
            c.effects = self.effect.clone();
        }
        let a = &mut c.analysis;
        if !self.tau_grid.is_empty() {
            a.tau_grid = self.tau_grid.clone();
        }
        if let Some(p) = self.p {
            a.p = p;
            if self.q.is_none() && a.q <= p {
                a.q = p + 1;
            }
        }
        a.q = self.q.unwrap_or(a.q);
        a.kernel = self.kernel.unwrap_or(a.kernel);
        a.reps = self.boot.unwrap_or(a.reps);
        a.level = self.level.unwrap_or(a.level);
        a.seed = self.seed.unwrap_or(a.seed);
        if let Some(h) = self.bandwidth {
            a.overrides = BandwidthOverrides::all(h);
        }
        Ok(c)
    }
}

/// Runs one analysis command on a complete configuration.
pub fn run_analysis(command: Command, cfg: &RunConfig) -> Result<Report, CliError> {
    let design = cfg.validate()?;
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file given".into()))?;
    let data = ingest::ingest(input, &cfg.columns)?;
    if let Some(rule) = cfg.kink.rule()? {
        let tol = 1e-9 * rule.cap.abs().max(1.0);
        data.sample
            .check_rule(|x| rule.eval(x), tol)
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let mut analysis_cfg = cfg.analysis.clone();
    if command == Command::Bandwidth {
        analysis_cfg.reps = 0;
    } else if command.needs_draws() && analysis_cfg.reps < 2 {
        return Err(CliError::Config(format!(
            "the {command:?} command needs at least 2 draws (--boot)"
        )));
    }
    let result = analyze(&data.sample, &design, &cfg.effects, &analysis_cfg)?;
    Ok(Report {
        schema: report::REPORT_SCHEMA.into(),
        version: report::version(),
        command,
        config: cfg.clone(),
        design,
        n: result.n,
        rejected_rows: data.rejected,
        fx: result.fx,
        effects: result
            .effects
            .iter()
            .map(|e| report::EffectOutput::new(command, e))
            .collect(),
    })
}

impl SimArgs {
    pub fn to_config(&self) -> Result<StudyConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::Config(format!("bad study config: {e}")))?,
            None => StudyConfig::default(),
        };
        if !self.n.is_empty() {
            c.n_list = self.n.clone();
        }
        if !self.effect.is_empty() {
            c.effects = self.effect.clone();
        }
        c.reps = self.reps.unwrap_or(c.reps);
        c.boot = self.boot.unwrap_or(c.boot);
        c.seed = self.seed.unwrap_or(c.seed);
        if let Some(h) = self.bandwidth {
            c.bandwidth_mode = BandwidthMode::Fixed { h };
        }
        Ok(c)
    }
}

pub fn run_simulation(cfg: &StudyConfig) -> Result<StudyOutput, CliError> {
    let report = run_study(cfg).map_err(|e| match e {
        RkdError::InvalidInput(m) => CliError::Config(m),
        other => CliError::Numerical(other),
    })?;
    Ok(StudyOutput {
        schema: report::STUDY_SCHEMA.into(),
        version: report::version(),
        report,
    })
}

/// Sizes the global worker pool from the environment.
pub fn configure_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    match cli.command {
        Cmd::Simulate(args) => {
            let cfg = args.to_config()?;
            let out = run_simulation(&cfg)?;
            if !args.quiet {
                eprint!("{}", report::study_summary(&out.report));
            }
            report::write_json(&out, args.out.as_deref())
        }
        Cmd::Estimate(args) => analysis_command(Command::Estimate, args),
        Cmd::Test(args) => analysis_command(Command::Test, args),
        Cmd::Band(args) => analysis_command(Command::Band, args),
        Cmd::Bandwidth(args) => analysis_command(Command::Bandwidth, args),
    }
}

fn analysis_command(command: Command, args: RunArgs) -> Result<(), CliError> {
    let cfg = args.to_config()?;
    let rep = run_analysis(command, &cfg)?;
    if !args.quiet {
        eprint!("{}", report::summary(&rep));
    }
    report::write_json(&rep, args.out.as_deref())?;
    if let Some(p) = &args.plot {
        report::write_plot_csv(&rep, std::fs::File::create(p)?)?;
    }
    Ok(())
}
