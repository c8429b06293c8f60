//! Run configuration: one JSON document, optionally overridden by flags.

use std::path::PathBuf;

use rkd_core::estimands::{EffectKind, KinkDesign};
use rkd_core::pipeline::AnalysisConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub y: String,
    pub x: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            y: "y".into(),
            x: "x".into(),
            b: None,
        }
    }
}

/// The kink, either explicitly or through a declared treatment rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_left: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_right: Option<f64>,
    /// A rule of the form `min(a*x, cap)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

/// A parsed `min(a·x, cap)` rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapRule {
    pub a: f64,
    pub cap: f64,
}

impl CapRule {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("cannot parse rule '{s}'; expected min(a*x, cap)"));
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = t
            .strip_prefix("min(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (lin, cap) = inner.split_once(',').ok_or_else(bad)?;
        let coef = lin
            .strip_suffix('x')
            .map(|c| c.trim_end_matches(['*', '·']))
            .ok_or_else(bad)?;
        let a = match coef {
            "" | "+" => 1.0,
            "-" => -1.0,
            c => c.parse::<f64>().map_err(|_| bad())?,
        };
        let cap = cap.parse::<f64>().map_err(|_| bad())?;
        if !(a.is_finite() && cap.is_finite()) || a == 0.0 {
            return Err(CliError::Config(format!("rule '{s}' has no kink")));
        }
        Ok(CapRule { a, cap })
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x).min(self.cap)
    }

    /// The linear piece binds below the kink when `a > 0` and above it otherwise.
    pub fn design(&self) -> KinkDesign {
        let x0 = self.cap / self.a;
        let (slope_left, slope_right) = if self.a > 0.0 { (self.a, 0.0) } else { (0.0, self.a) };
        KinkDesign {
            x0,
            slope_left,
            slope_right,
        }
    }
}

impl KinkSpec {
    pub fn rule(&self) -> Result<Option<CapRule>, CliError> {
        self.rule.as_deref().map(CapRule::parse).transpose()
    }

    pub fn resolve(&self) -> Result<KinkDesign, CliError> {
        let explicit = [self.x0, self.slope_left, self.slope_right];
        let any_explicit = explicit.iter().any(Option::is_some);
        let design = match (self.rule()?, any_explicit) {
            (Some(_), true) => {
                return Err(CliError::Config(
                    "give either x0 with both slopes or a rule, not both".into(),
                ))
            }
            (Some(r), false) => r.design(),
            (None, _) => match explicit {
                [Some(x0), Some(slope_left), Some(slope_right)] => KinkDesign {
                    x0,
                    slope_left,
                    slope_right,
                },
                _ => {
                    return Err(CliError::Config(
                        "the kink needs x0, slope_left and slope_right, or a rule".into(),
                    ))
                }
            },
        };
        design.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(design)
    }
}

fn all_effects() -> Vec<EffectKind> {
    EffectKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
    #[serde(default)]
    pub kink: KinkSpec,
    #[serde(default = "all_effects")]
    pub effects: Vec<EffectKind>,
    /// Orders, kernel, grids, draws, level, seed and bandwidth overrides.
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            columns: ColumnMap::default(),
            kink: KinkSpec::default(),
            effects: all_effects(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))
    }

    pub fn validate(&self) -> Result<KinkDesign, CliError> {
        if self.effects.is_empty() {
            return Err(CliError::Config("no effects requested".into()));
        }
        self.analysis
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.kink.resolve()
    }
}
