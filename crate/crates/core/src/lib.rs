//! Anomaly-aware backbone pre-training: synthetic defects, text-anchored
//! alignment, and embedding-based evaluation on small CPU budgets.

pub mod backbone;
pub mod data;
pub mod downstream;
pub mod experiment;
pub mod imaging;
pub mod prompts;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

/// Version tag carried by every JSON report.
pub const SCHEMA: &str = "tab/1";
