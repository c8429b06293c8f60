pub mod bandwidth;
pub mod density;
pub mod error;
pub mod estimands;
pub mod inference;
pub mod kernel;
pub mod pipeline;
pub mod quadrature;
pub mod regression;
pub mod simulation;

pub use error::{Result, RkdError};
pub use kernel::{Kernel, KernelConstants, Side};
pub use regression::{ConstrainedFit, Sample};
