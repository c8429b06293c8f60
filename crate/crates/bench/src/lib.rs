//! Shared fixtures for the benchmarks.

use rkd_core::simulation::{generate_dgp, DgpConfig};
use rkd_core::Sample;

/// A draw from the simulation design.
pub fn dgp_sample(n: usize) -> Sample {
    generate_dgp(&DgpConfig {
        n,
        seed: 42,
        ..Default::default()
    })
    .expect("valid design")
}
