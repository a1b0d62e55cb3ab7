//! Orchestration for item-promotion attack experiments: configuration,
//! synthetic corpora, resumable stages, sweeps, ablations and reports.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod report;
pub mod rundir;
pub mod stages;
pub mod synthetic;

pub use config::RunConfig;
pub use rundir::RunDir;
