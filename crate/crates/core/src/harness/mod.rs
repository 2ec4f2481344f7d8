//! Experiment harness: configuration, seeded closed-loop runs, controller
//! comparisons, the model-based versus data-driven equivalence check and a
//! Monte-Carlo check of the predicted input/output distributions.
//!
//! Randomness is keyed by `(seed, stream)`. Run noise uses the configured
//! stream, the initial state a tagged copy of it, and offline data a
//! dedicated stream shared by every run of a sweep.

mod checks;
mod config;
mod run;

pub use checks::{
    equivalence_check, mc_validate_distribution, EquivalenceReport, McEntry, McReport,
};
pub use config::{
    BeliefSpec, BoxConstraints, ConstraintSpec, ControllerSpec, CostSpec, DeepcSpec,
    EquivalenceSpec, ExperimentConfig, IraSpec, MatrixPlant, OfflineSpec, PlantSpec,
    PolytopeConstraints, Prepared, RandomPlant, ReferenceSegment, Rows, SddpcSpec, SpcSpec,
};
pub use run::{
    build_controller, collect_data, compare_controllers, realization, run_experiment, run_sweep,
    sample_initial_state, save_json, write_offline_csv, Comparison, ComparisonRow,
    ControlStepSummary, RunReport, StepReport,
};

use thiserror::Error;

use crate::controllers::ControllerError;
use crate::datadriven::DataError;
use crate::plant::PlantError;

/// Stream reserved for offline data collection.
pub const OFFLINE_STREAM: u64 = 1 << 62;
/// XOR-ed into a run's stream to draw its initial state.
pub const INITIAL_STATE_TAG: u64 = 1 << 61;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Whether the error was raised before anything ran.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Assumption(_))
    }
}
