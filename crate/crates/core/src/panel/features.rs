//! Feature specification and flattening of panels into estimation rows.
//!
//! A row for job `k` pairs the current job with the future job `k + lag`. The
//! vector `r` holds every declared feature (the conditioning set); `s` is the
//! selected subset used by the numerator propensity and the effect basis.
//!
//! Feature naming:
//! - current column `x` -> `x`; future column -> `fut.x`
//! - powers -> `x^2`, `fut.x^3`, ...
//! - truncated-power spline hinges -> `x>30^2` for `(x - 30)_+^2`
//! - lagged decisions -> `a.lag1` and the padding indicator `a.lag1.pad`

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Panel, PanelError, PanelSet};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The current job `k`.
    #[default]
    Current,
    /// The future job `k + lag`.
    Future,
}

/// One declared feature term. Transforms may expand to several features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    Current {
        column: String,
    },
    Future {
        column: String,
    },
    /// Powers 1..=degree of a column.
    Poly {
        column: String,
        #[serde(default)]
        source: Source,
        degree: u32,
    },
    /// Truncated-power spline: powers 1..=degree plus `(x - knot)_+^degree` per knot.
    Spline {
        column: String,
        #[serde(default)]
        source: Source,
        degree: u32,
        knots: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub lag: usize,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    /// Adds `A_{k-i}` for i = 1..=n plus a padding indicator per slot.
    #[serde(default)]
    pub n_lagged_actions: usize,
    /// Features forming `S_k` (numerator design is `[1, S]`).
    #[serde(default)]
    pub s_features: Vec<String>,
    /// Effect basis `f(S)` besides the constant; defaults to all of `s_features`.
    #[serde(default)]
    pub f_features: Option<Vec<String>>,
    /// Baseline basis `g(R)` besides the constant; defaults to every feature.
    #[serde(default)]
    pub g_features: Option<Vec<String>>,
    /// Denominator design `[1, ...]`; defaults to every feature.
    #[serde(default)]
    pub p_features: Option<Vec<String>>,
}

impl FeatureSpec {
    pub fn new(lag: usize, terms: Vec<TermSpec>) -> Self {
        Self {
            lag,
            terms,
            n_lagged_actions: 0,
            s_features: Vec::new(),
            f_features: None,
            g_features: None,
            p_features: None,
        }
    }

    pub fn with_lagged_actions(mut self, n: usize) -> Self {
        self.n_lagged_actions = n;
        self
    }

    pub fn with_s(mut self, s: &[&str]) -> Self {
        self.s_features = s.iter().map(|v| v.to_string()).collect();
        self
    }

    pub fn with_f(mut self, f: &[&str]) -> Self {
        self.f_features = Some(f.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn with_g(mut self, g: &[&str]) -> Self {
        self.g_features = Some(g.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn with_p(mut self, p: &[&str]) -> Self {
        self.p_features = Some(p.iter().map(|v| v.to_string()).collect());
        self
    }

    pub fn compile(&self, column_names: &[String]) -> Result<CompiledFeatures, PanelError> {
        CompiledFeatures::new(self, column_names)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Eval {
    Column { col: usize, source: Source },
    Power { col: usize, source: Source, power: i32 },
    Hinge { col: usize, source: Source, knot: f64, power: i32 },
    LaggedAction { lag: usize },
    LagPadding { lag: usize },
}

/// Positions of each working-model design inside a row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub r_names: Vec<String>,
    pub s_names: Vec<String>,
    /// Indices into `s` of the effect basis (constant excluded).
    pub f_idx: Vec<usize>,
    /// Indices into `r` of the baseline basis (constant excluded).
    pub g_idx: Vec<usize>,
    /// Indices into `r` of the denominator design (constant excluded).
    pub p_idx: Vec<usize>,
    /// Indices into `r` that form `s`.
    pub s_in_r: Vec<usize>,
}

impl ModelLayout {
    pub fn f_names(&self) -> Vec<String> {
        std::iter::once("(intercept)".to_string())
            .chain(self.f_idx.iter().map(|&i| self.s_names[i].clone()))
            .collect()
    }

    pub fn g_names(&self) -> Vec<String> {
        std::iter::once("(intercept)".to_string())
            .chain(self.g_idx.iter().map(|&i| self.r_names[i].clone()))
            .collect()
    }

    /// True when the numerator and denominator designs coincide (`S_k = R_k`).
    pub fn s_equals_p(&self) -> bool {
        self.s_in_r == self.p_idx
    }

    pub fn q_design(&self, s: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(s.iter().copied()).collect()
    }

    pub fn p_design(&self, r: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(self.p_idx.iter().map(|&i| r[i])).collect()
    }

    pub fn g_basis(&self, r: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(self.g_idx.iter().map(|&i| r[i])).collect()
    }

    pub fn f_basis(&self, s: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(self.f_idx.iter().map(|&i| s[i])).collect()
    }
}

/// A feature spec resolved against a column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledFeatures {
    lag: usize,
    evals: Vec<Eval>,
    layout: ModelLayout,
}

impl CompiledFeatures {
    fn new(spec: &FeatureSpec, columns: &[String]) -> Result<Self, PanelError> {
        if spec.lag == 0 {
            return Err(PanelError::InvalidSpec("lag must be at least 1".into()));
        }
        let col = |name: &str| {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| PanelError::SpecColumnUnknown(name.to_string()))
        };
        let base = |name: &str, source: Source| match source {
            Source::Current => name.to_string(),
            Source::Future => format!("fut.{name}"),
        };
        let mut names = Vec::new();
        let mut evals = Vec::new();
        for term in &spec.terms {
            match term {
                TermSpec::Current { column } | TermSpec::Future { column } => {
                    let source = if matches!(term, TermSpec::Current { .. }) {
                        Source::Current
                    } else {
                        Source::Future
                    };
                    evals.push(Eval::Column { col: col(column)?, source });
                    names.push(base(column, source));
                }
                TermSpec::Poly {
                    column,
                    source,
                    degree,
                } => {
                    if *degree == 0 {
                        return Err(PanelError::InvalidSpec(format!("poly `{column}` needs degree >= 1")));
                    }
                    let c = col(column)?;
                    for power in 1..=*degree as i32 {
                        evals.push(Eval::Power { col: c, source: *source, power });
                        names.push(format!("{}^{power}", base(column, *source)));
                    }
                }
                TermSpec::Spline {
                    column,
                    source,
                    degree,
                    knots,
                } => {
                    if !(2..=3).contains(degree) {
                        return Err(PanelError::InvalidSpec(format!(
                            "spline `{column}` degree must be 2 or 3"
                        )));
                    }
                    if knots.windows(2).any(|w| w[0] >= w[1]) || knots.iter().any(|k| !k.is_finite()) {
                        return Err(PanelError::InvalidSpec(format!(
                            "spline `{column}` knots must be finite and strictly increasing"
                        )));
                    }
                    let c = col(column)?;
                    let b = base(column, *source);
                    for power in 1..=*degree as i32 {
                        evals.push(Eval::Power { col: c, source: *source, power });
                        names.push(format!("{b}^{power}"));
                    }
                    for &knot in knots {
                        evals.push(Eval::Hinge {
                            col: c,
                            source: *source,
                            knot,
                            power: *degree as i32,
                        });
                        names.push(format!("{b}>{knot}^{degree}"));
                    }
                }
            }
        }
        for lag in 1..=spec.n_lagged_actions {
            evals.push(Eval::LaggedAction { lag });
            names.push(format!("a.lag{lag}"));
            evals.push(Eval::LagPadding { lag });
            names.push(format!("a.lag{lag}.pad"));
        }

        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(PanelError::DuplicateFeature(n.clone()));
            }
        }
        let index_in = |pool: &[String], wanted: &[String]| -> Result<Vec<usize>, PanelError> {
            let mut out = Vec::with_capacity(wanted.len());
            for w in wanted {
                let i = pool
                    .iter()
                    .position(|n| n == w)
                    .ok_or_else(|| PanelError::UnknownFeature(w.clone()))?;
                if out.contains(&i) {
                    return Err(PanelError::DuplicateFeature(w.clone()));
                }
                out.push(i);
            }
            Ok(out)
        };
        let all: Vec<usize> = (0..names.len()).collect();
        let s_in_r = index_in(&names, &spec.s_features)?;
        let s_names = spec.s_features.clone();
        let f_idx = match &spec.f_features {
            Some(f) => index_in(&s_names, f)?,
            None => (0..s_names.len()).collect(),
        };
        let g_idx = match &spec.g_features {
            Some(g) => index_in(&names, g)?,
            None => all.clone(),
        };
        let p_idx = match &spec.p_features {
            Some(p) => index_in(&names, p)?,
            None => all,
        };
        Ok(Self {
            lag: spec.lag,
            evals,
            layout: ModelLayout {
                r_names: names,
                s_names,
                f_idx,
                g_idx,
                p_idx,
                s_in_r,
            },
        })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    fn value(&self, eval: &Eval, panel: &Panel, k: usize) -> f64 {
        let pick = |col: usize, source: Source| {
            let idx = match source {
                Source::Current => k,
                Source::Future => k + self.lag,
            };
            panel.jobs[idx - 1].x[col]
        };
        match *eval {
            Eval::Column { col, source } => pick(col, source),
            Eval::Power { col, source, power } => pick(col, source).powi(power),
            Eval::Hinge {
                col,
                source,
                knot,
                power,
            } => (pick(col, source) - knot).max(0.0).powi(power),
            Eval::LaggedAction { lag } => {
                if k > lag {
                    f64::from(panel.jobs[k - lag - 1].a)
                } else {
                    0.0
                }
            }
            Eval::LagPadding { lag } => {
                if k > lag {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Evaluates `R_k` on a panel; `None` when job `k + lag` does not exist.
    pub fn evaluate_r(&self, panel: &Panel, k: usize) -> Option<Vec<f64>> {
        if k == 0 || k + self.lag > panel.len() {
            return None;
        }
        Some(self.evals.iter().map(|e| self.value(e, panel, k)).collect())
    }

    /// Evaluates only the named features directly.
    pub fn evaluate_named(&self, panel: &Panel, k: usize, names: &[String]) -> Result<Option<Vec<f64>>, PanelError> {
        let idx = names
            .iter()
            .map(|n| {
                self.layout
                    .r_names
                    .iter()
                    .position(|r| r == n)
                    .ok_or_else(|| PanelError::UnknownFeature(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if k == 0 || k + self.lag > panel.len() {
            return Ok(None);
        }
        Ok(Some(idx.iter().map(|&i| self.value(&self.evals[i], panel, k)).collect()))
    }

    fn panel_rows(&self, panel_index: usize, panel: &Panel) -> Vec<EstimationRow> {
        let count = panel.len().saturating_sub(self.lag);
        (1..=count)
            .map(|k| {
                let r: Vec<f64> = self.evals.iter().map(|e| self.value(e, panel, k)).collect();
                let s = self.layout.s_in_r.iter().map(|&i| r[i]).collect();
                EstimationRow {
                    panel: panel_index,
                    k,
                    r,
                    s,
                    a: panel.jobs[k - 1].a,
                    y_future: panel.jobs[k + self.lag - 1].y,
                }
            })
            .collect()
    }
}

/// One `(k, k + lag)` pair flattened for estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRow {
    /// Index of the source panel within the panel set.
    pub panel: usize,
    /// 1-based index of the current job.
    pub k: usize,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub a: u8,
    pub y_future: f64,
}

/// Rows for every panel, ordered by (panel, k), plus the panel count.
///
/// Panels with `K <= lag` contribute no rows but still count toward `n_panels`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRows {
    pub rows: Vec<EstimationRow>,
    pub n_panels: usize,
    pub panel_ids: Vec<String>,
    pub layout: ModelLayout,
    pub lag: usize,
}

impl EstimationRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row index ranges per panel (empty ranges for panels without rows).
    pub fn panel_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.n_panels];
        let mut start = 0;
        while start < self.rows.len() {
            let p = self.rows[start].panel;
            let mut end = start;
            while end < self.rows.len() && self.rows[end].panel == p {
                end += 1;
            }
            ranges[p] = start..end;
            start = end;
        }
        ranges
    }

    /// Number of panels that contributed at least one row.
    pub fn contributing_panels(&self) -> usize {
        self.panel_ranges().iter().filter(|r| !r.is_empty()).count()
    }
}

/// Flattens every panel into estimation rows for `spec`.
pub fn build_rows(panels: &PanelSet, spec: &FeatureSpec) -> Result<EstimationRows, PanelError> {
    let compiled = spec.compile(panels.column_names())?;
    let per_panel = par::map_indexed(panels.len(), |i| compiled.panel_rows(i, &panels.panels()[i]));
    Ok(EstimationRows {
        rows: per_panel.into_iter().flatten().collect(),
        n_panels: panels.len(),
        panel_ids: panels.panels().iter().map(|p| p.id.clone()).collect(),
        layout: compiled.layout().clone(),
        lag: spec.lag,
    })
}
