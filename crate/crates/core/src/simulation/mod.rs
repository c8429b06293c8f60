//! The Monte Carlo design, its analytic effects and the replication harness.
mod dgp;
mod study;

pub use dgp::{generate_dgp, true_density, true_effects, true_quantile, DgpConfig};
pub use study::{replication_seed, run_study, BandwidthMode, EffectTable, StudyConfig, StudyMeta, StudyReport};
