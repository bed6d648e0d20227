//! Probe-based evaluation: the frozen classifier, proxy scores, and the
//! benchmark, ablation and sweep harnesses.

mod bench;
mod probe;

pub use bench::*;
pub use probe::*;
