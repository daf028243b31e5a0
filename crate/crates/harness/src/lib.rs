//! Experiment harness for physical model recovery: benchmark data
//! generation, Φ-configuration sweeps, real-data ingestion and reports.

pub mod data;
pub mod experiment;
pub mod report;

use std::fmt::Display;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Dynamics(#[from] physrec_core::dynamics::DynamicsError),
    #[error(transparent)]
    Solve(#[from] physrec_core::odesolve::SolveError),
    #[error(transparent)]
    Signal(#[from] physrec_core::signal::SignalError),
    #[error(transparent)]
    Neural(#[from] physrec_core::neuralmr::NeuralError),
    #[error(transparent)]
    Sindy(#[from] physrec_core::sindy::SindyError),
}

impl HarnessError {
    pub fn io(path: &Path, e: impl Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}
