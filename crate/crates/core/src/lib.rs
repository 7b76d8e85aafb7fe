//! Lag-effect estimation for panels of sequentially processed jobs.

pub mod efficient;
pub mod estimator;
pub mod glm;
pub mod numeric;
pub mod panel;
pub mod par;
pub mod sim;
pub mod study;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the config-driven entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Data { path: PathBuf, source: panel::PanelError },
    #[error(transparent)]
    Panel(#[from] panel::PanelError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Estimate(#[from] estimator::EstimateError),
    #[error(transparent)]
    Efficient(#[from] efficient::EfficientError),
    #[error(transparent)]
    Study(#[from] study::StudyError),
}

impl Error {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Panel(_) => "config",
            Error::Io { .. } => "io",
            Error::Data { .. } => "data",
            Error::Sim(_) => "simulation",
            Error::Estimate(_) | Error::Efficient(_) => "estimation",
            Error::Study(_) => "study",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "data" => 4,
            "estimation" => 5,
            "simulation" => 6,
            _ => 7,
        }
    }
}
