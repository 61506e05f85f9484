//! Experiment drivers for factordiff: end-to-end runs, rate and
//! adaptivity studies, decomposition checks and CSV reports.

pub mod config;
pub mod fit;
pub mod pipeline;
pub mod report;
pub mod study;
pub mod verify;

pub use config::{Capacity, DensityChoice, ModelChoice, RunConfig};
pub use pipeline::{run_end_to_end, RunOutput};
pub use report::{emit_report, RateRecord};
pub use study::{run_adaptivity_study, run_rate_study, StudyOptions};
