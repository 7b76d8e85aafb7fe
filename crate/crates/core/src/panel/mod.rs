//! Panel data model: jobs processed in order within independent panels.

mod csv_io;
mod features;

pub use csv_io::{parse_panels, write_panels};
pub use features::{
    build_rows, CompiledFeatures, EstimationRow, EstimationRows, FeatureSpec, ModelLayout, Source,
    TermSpec,
};

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("panel `{panel}`: job_index values are not contiguous from 1 (line {line})")]
    NonContiguousIndex { panel: String, line: u64 },
    #[error("line {line}: decision `a` must be 0 or 1, found `{value}`")]
    NonBinaryDecision { line: u64, value: String },
    #[error("line {line}: column `{column}` is not a finite number (`{value}`)")]
    NonFiniteValue {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: column `{column}` could not be parsed (`{value}`)")]
    Malformed {
        line: u64,
        column: String,
        value: String,
    },
    #[error("panel `{0}` has no jobs")]
    EmptyPanel(String),
    #[error("duplicate panel id `{0}`")]
    DuplicatePanel(String),
    #[error("panel `{panel}` job {k}: expected {expected} features, found {found}")]
    DimensionMismatch {
        panel: String,
        k: usize,
        expected: usize,
        found: usize,
    },
    #[error("feature spec references unknown column `{0}`")]
    SpecColumnUnknown(String),
    #[error("feature spec references unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` is defined more than once")]
    DuplicateFeature(String),
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One job: context features, binary decision, outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub x: Vec<f64>,
    pub a: u8,
    pub y: f64,
}

impl Job {
    pub fn new(x: Vec<f64>, a: u8, y: f64) -> Self {
        Self { x, a, y }
    }
}

/// An ordered sequence of jobs from one independent panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub id: String,
    pub jobs: Vec<Job>,
}

impl Panel {
    pub fn new(id: impl Into<String>, jobs: Vec<Job>) -> Self {
        Self {
            id: id.into(),
            jobs,
        }
    }

    /// Number of jobs `K`.
    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Job `k` using 1-based indexing.
    pub fn job(&self, k: usize) -> Option<&Job> {
        k.checked_sub(1).and_then(|i| self.jobs.get(i))
    }
}

/// A validated collection of panels sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSet {
    panels: Vec<Panel>,
    column_names: Vec<String>,
}

impl PanelSet {
    pub fn new(panels: Vec<Panel>, column_names: Vec<String>) -> Result<Self, PanelError> {
        let d = column_names.len();
        let mut seen = HashSet::with_capacity(panels.len());
        for panel in &panels {
            if !seen.insert(panel.id.as_str()) {
                return Err(PanelError::DuplicatePanel(panel.id.clone()));
            }
            if panel.jobs.is_empty() {
                return Err(PanelError::EmptyPanel(panel.id.clone()));
            }
            for (i, job) in panel.jobs.iter().enumerate() {
                if job.x.len() != d {
                    return Err(PanelError::DimensionMismatch {
                        panel: panel.id.clone(),
                        k: i + 1,
                        expected: d,
                        found: job.x.len(),
                    });
                }
                if job.a > 1 {
                    return Err(PanelError::NonBinaryDecision {
                        line: 0,
                        value: job.a.to_string(),
                    });
                }
                let bad = std::iter::once(("y", job.y))
                    .chain(column_names.iter().map(String::as_str).zip(job.x.iter().copied()))
                    .find(|(_, v)| !v.is_finite());
                if let Some((column, v)) = bad {
                    return Err(PanelError::NonFiniteValue {
                        line: 0,
                        column: column.to_string(),
                        value: v.to_string(),
                    });
                }
            }
        }
        Ok(Self {
            panels,
            column_names,
        })
    }

    pub fn panels(&self) -> &[Panel] {
        &self.panels
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn feature_dimension(&self) -> usize {
        self.column_names.len()
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn total_jobs(&self) -> usize {
        self.panels.iter().map(Panel::len).sum()
    }

    /// Drops panels with fewer than `min_jobs` jobs.
    pub fn filter_min_size(&self, min_jobs: usize) -> PanelSet {
        PanelSet {
            panels: self
                .panels
                .iter()
                .filter(|p| p.len() >= min_jobs)
                .cloned()
                .collect(),
            column_names: self.column_names.clone(),
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }
}
