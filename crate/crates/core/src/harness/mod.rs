//! Scenario files, closed-loop simulation, trajectory output and timing.

mod benchmark;
mod emit;
mod run;
mod scenario;

pub use benchmark::{benchmark, check_pair, report, round3, BenchmarkReport, TimingRow};
pub use emit::{csv_header, emit, read_json_log, verify_records, write_csv, write_json, OutputFormat};
pub use run::{
    mean_std, run_closed_loop, simulate, Failure, RunStatus, RunSummary, StepRecord, TrajectoryLog, INPUT_TOL,
    OUTPUT_TOL,
};
pub use scenario::{
    load_scenario, ChartKind, ChartSpec, Composition, MatrixSpec, MpcSpec, PlantSpec, Primitive, RunSpec, Scenario,
    SetSpec, Setup, StopSpec, CERTIFY_GRID, CERTIFY_RESOLUTION,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("parse error at {field}: {message}")]
    Parse { field: String, message: String },
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Field the error refers to, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            HarnessError::Parse { field, .. } | HarnessError::Invalid { field, .. } => Some(field),
            HarnessError::Io(_) => None,
        }
    }

    pub fn is_validation(&self) -> bool {
        !matches!(self, HarnessError::Io(_))
    }
}

#[cfg(test)]
mod tests;
