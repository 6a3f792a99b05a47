//! Float64 ground truth for the fixed-point kernels in `swiftkv`.
//!
//! Nothing here depends on the kernel crate: every reference works on plain `f64`
//! slices so that a test comparing the two never shares an implementation path.

pub mod attention;
pub mod layer;
pub mod metrics;
pub mod rope;
