//! Experiment harness: dataset synthesis, run directories, evaluation,
//! sweeps and reports for the `setgan` command.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod report;
pub mod runs;
pub mod sweep;

pub use error::{LabError, LabResult};
