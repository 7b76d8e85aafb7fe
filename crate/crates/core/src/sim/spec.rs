//! Declarative scenario kernels.
//!
//! Every kernel is an index `intercept + Σ coef · Π factors` over a bounded
//! history window. Factors are written as strings:
//!
//! | factor      | meaning                                  |
//! |-------------|------------------------------------------|
//! | `x:NAME`    | context column `NAME` of the current job |
//! | `a`, `y`    | decision / outcome of the current job    |
//! | `x:NAME@L`  | context column of job `j − L`            |
//! | `a@L`, `y@L`| decision / outcome of job `j − L`        |
//!
//! History before the first job evaluates to 0. Which factors are legal
//! depends on the kernel: contexts see only the past, decisions add the current
//! context, outcomes add the current decision, and the continuation kernel
//! (evaluated after job `j` completes) may use all of job `j`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Factor {
    X { name: String, lag: usize },
    A { lag: usize },
    Y { lag: usize },
}

impl FromStr for Factor {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimError::InvalidSpec(format!("cannot parse factor `{s}`"));
        let (body, lag) = match s.split_once('@') {
            Some((b, l)) => {
                let lag: usize = l.parse().map_err(|_| bad())?;
                if lag == 0 {
                    return Err(bad());
                }
                (b, lag)
            }
            None => (s, 0),
        };
        match body {
            "a" => Ok(Factor::A { lag }),
            "y" => Ok(Factor::Y { lag }),
            _ => match body.strip_prefix("x:") {
                Some(name) if !name.is_empty() => Ok(Factor::X {
                    name: name.to_string(),
                    lag,
                }),
                _ => Err(bad()),
            },
        }
    }
}

impl TryFrom<String> for Factor {
    type Error = SimError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (body, lag) = match self {
            Factor::X { name, lag } => (format!("x:{name}"), *lag),
            Factor::A { lag } => ("a".to_string(), *lag),
            Factor::Y { lag } => ("y".to_string(), *lag),
        };
        if lag == 0 {
            write!(f, "{body}")
        } else {
            write!(f, "{body}@{lag}")
        }
    }
}

impl From<Factor> for String {
    fn from(f: Factor) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    #[serde(default)]
    pub of: Vec<Factor>,
}

impl Term {
    pub fn new(coef: f64, of: &[&str]) -> Result<Self, SimError> {
        Ok(Self {
            coef,
            of: of.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearIndex {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl LinearIndex {
    pub fn constant(intercept: f64) -> Self {
        Self {
            intercept,
            terms: Vec::new(),
        }
    }

    pub fn with(mut self, coef: f64, of: &[&str]) -> Result<Self, SimError> {
        self.terms.push(Term::new(coef, of)?);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// `logit⁻¹(index)`.
    #[default]
    Logit,
    /// The index itself, clamped into [0, 1].
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityKernel {
    #[serde(default)]
    pub link: Link,
    #[serde(flatten)]
    pub index: LinearIndex,
}

impl ProbabilityKernel {
    pub fn logit(index: LinearIndex) -> Self {
        Self {
            link: Link::Logit,
            index,
        }
    }

    pub fn identity(index: LinearIndex) -> Self {
        Self {
            link: Link::Identity,
            index,
        }
    }

    /// Always continue (used for fixed panel length `k_max`).
    pub fn always() -> Self {
        Self::identity(LinearIndex::constant(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextFamily {
    /// `1{u < logit⁻¹(index)}`.
    Bernoulli,
    /// `index + sd · N(0, 1)`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextKernel {
    pub name: String,
    pub family: ContextFamily,
    #[serde(flatten)]
    pub index: LinearIndex,
    #[serde(default = "one")]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

impl ContextKernel {
    pub fn bernoulli(name: &str, index: LinearIndex) -> Self {
        Self {
            name: name.into(),
            family: ContextFamily::Bernoulli,
            index,
            sd: 1.0,
        }
    }

    pub fn gaussian(name: &str, index: LinearIndex, sd: f64) -> Self {
        Self {
            name: name.into(),
            family: ContextFamily::Gaussian,
            index,
            sd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    #[default]
    Gaussian,
    /// ±1 with equal probability.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeKernel {
    #[serde(flatten)]
    pub mean: LinearIndex,
    #[serde(default)]
    pub noise: NoiseKind,
    /// Noise scale index; negative values are treated as 0.
    #[serde(default = "unit_scale")]
    pub scale: LinearIndex,
}

fn unit_scale() -> LinearIndex {
    LinearIndex::constant(1.0)
}

impl OutcomeKernel {
    pub fn new(mean: LinearIndex, noise: NoiseKind, scale: LinearIndex) -> Self {
        Self { mean, noise, scale }
    }
}

fn default_k_max() -> usize {
    50
}

fn default_floor() -> f64 {
    0.01
}

/// A generative model for panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub label: String,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Decision probabilities are clamped into `[floor, 1 − floor]`.
    #[serde(default = "default_floor")]
    pub positivity_floor: f64,
    pub context: Vec<ContextKernel>,
    pub decision: ProbabilityKernel,
    pub outcome: OutcomeKernel,
    pub continuation: ProbabilityKernel,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string(self).map_err(|e| SimError::InvalidSpec(e.to_string()))
    }

    pub fn column_names(&self) -> Vec<String> {
        self.context.iter().map(|c| c.name.clone()).collect()
    }
}
