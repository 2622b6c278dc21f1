//! Run configuration, sweeps, results files and reports.

pub mod config;
pub mod gradcheck;
pub mod report;
pub mod results;
pub mod runner;

pub use config::ExperimentConfig;
pub use results::ResultRecord;
