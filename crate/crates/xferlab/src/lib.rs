//! Experiment harness: base training, candidate adaptation, grid search and
//! constrained selection over transducer adaptation methods.

pub mod candidate;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;

pub use candidate::{Candidate, Method};
pub use config::HarnessConfig;
pub use error::{HarnessError, Result};
pub use grid::{run_grid, SelectionOutcome};
