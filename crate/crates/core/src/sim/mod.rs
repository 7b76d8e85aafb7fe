//! Synthetic panels from a declarative causal model, paired counterfactual
//! worlds with shared exogenous noise, and Monte Carlo ground truth.

mod engine;
mod oracle;
mod spec;

pub use engine::{derive_seed, simulate_panels, Scenario, WorldPair};
pub use oracle::{
    check_identification, oracle_lag_effect, Binning, CellFeature, Conditioning, IdentificationReport,
    OracleEstimate, SCondition,
};
pub use spec::{
    ContextFamily, ContextKernel, Factor, Link, LinearIndex, NoiseKind, OutcomeKernel, ProbabilityKernel,
    ScenarioSpec, Term,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("job {k_star} is never reached (panel ended at {k})")]
    KStarNeverReached { k_star: usize, k: usize },
    #[error("conditioning cell {cell} has no replicates in arm {arm}")]
    EmptyConditioningCell { cell: String, arm: String },
    #[error("conditioning: {0}")]
    Conditioning(String),
}
