//! Deterministic discrete-event simulation of federated sites driven by a scenario file.

pub mod engine;
pub mod report;
pub mod scenario;

use thiserror::Error;

pub use engine::{Engine, ENGINE_SUBJECT};
pub use report::{
    audit_log, derive_metrics, DeploymentOutcome, FinalState, LogEvent, LogRecord, Metrics, RunReport, SiteMetrics,
};
pub use scenario::{EventAction, PhysicalNode, ProviderSpec, Scenario, ScenarioEvent, UserSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("{0}")]
    Io(String),
    #[error("scenario line {line}: {message}")]
    Scenario { line: usize, message: String },
    #[error("unresolved reference: {0}")]
    UnresolvedReference(String),
    #[error("invariant violated at t={t}: {message}")]
    InvariantViolation { t: u64, message: String },
}

/// Runs a scenario to its horizon.
pub fn run_scenario(scenario: Scenario) -> Result<RunReport, SimError> {
    Engine::new(scenario)?.finish()
}
