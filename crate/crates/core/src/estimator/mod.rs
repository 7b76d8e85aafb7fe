//! Weighted and centered estimating equations for lag effects.
//!
//! Two stages: logistic fits for the numerator propensity `q(S; ξ)` and the
//! denominator propensity `p(R; η)`, then a weighted least-squares solve for
//! `(α, β)` with weights `W = A q/p + (1 − A)(1 − q)/(1 − p)` and design
//! `D = [g(R), q f(S), A f(S)]`. The covariance is the stacked sandwich.

mod report;
mod sandwich;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{self, GlmError, LogisticFit};
use crate::numeric::{self, inv_logit};
use crate::panel::{EstimationRow, EstimationRows, ModelLayout};
use crate::par;

pub use report::{format_estimate, format_p_value, render_table, write_tsv, ReportRow, WaldReport, Z_975};
pub use sandwich::{meat_matrix, numerical_jacobian, sandwich_covariance, stacked_jacobian, Sandwich};

pub const DEFAULT_CLIP: f64 = 1e-3;
/// Relative step of the central differences in the bread's cross blocks.
pub const FD_STEP: f64 = 1e-6;
/// Bread matrices with a larger condition number are treated as singular.
pub const MAX_BREAD_CONDITION: f64 = 1e12;
const AUGMENTATION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("no estimation rows")]
    NoRows,
    #[error("at least 2 panels must contribute rows, found {0}")]
    TooFewPanels(usize),
    #[error("{stage} fit failed: {source}")]
    Glm {
        stage: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("bread matrix is singular (condition number {condition:e})")]
    SingularBread { condition: f64 },
    #[error("contrast has zero variance")]
    ZeroVariance,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateOptions {
    /// Both propensities are clipped into `[clip, 1 − clip]`.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Skip the sandwich (covariance is left as zeros).
    #[serde(default = "yes")]
    pub covariance: bool,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

fn yes() -> bool {
    true
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            clip: DEFAULT_CLIP,
            covariance: true,
        }
    }
}

/// `(value clipped into [clip, 1 − clip], whether clipping fired)`.
pub fn clip_probability(p: f64, clip: f64) -> (f64, bool) {
    let c = p.clamp(clip, 1.0 - clip);
    (c, c != p)
}

/// Weight for one row after clipping `q` and `p`; also returns how many of the two were clipped.
pub fn compute_weight(a: u8, q: f64, p: f64, clip: f64) -> (f64, u32) {
    let (q, cq) = clip_probability(q, clip);
    let (p, cp) = clip_probability(p, clip);
    let w = if a == 1 { q / p } else { (1.0 - q) / (1.0 - p) };
    (w, u32::from(cq) + u32::from(cp))
}

/// `[g, q·f]`.
pub fn augment_baseline(g: &[f64], q: f64, f: &[f64]) -> Vec<f64> {
    g.iter().copied().chain(f.iter().map(|v| q * v)).collect()
}

/// Shape of the stacked parameter and everything needed to evaluate the score.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStructure {
    pub layout: ModelLayout,
    /// Indices into `f` of the `q·f` columns kept in the baseline.
    pub kept_augmentation: Vec<usize>,
    pub clip: f64,
}

impl ModelStructure {
    pub fn new(layout: ModelLayout, kept_augmentation: Vec<usize>, clip: f64) -> Self {
        Self {
            layout,
            kept_augmentation,
            clip,
        }
    }

    pub fn dim_xi(&self) -> usize {
        1 + self.layout.s_names.len()
    }

    pub fn dim_eta(&self) -> usize {
        1 + self.layout.p_idx.len()
    }

    pub fn dim_alpha(&self) -> usize {
        1 + self.layout.g_idx.len() + self.kept_augmentation.len()
    }

    pub fn dim_beta(&self) -> usize {
        1 + self.layout.f_idx.len()
    }

    pub fn dim(&self) -> usize {
        self.dim_xi() + self.dim_eta() + self.dim_alpha() + self.dim_beta()
    }

    /// Offsets of ξ, η, α, β within θ.
    pub fn offsets(&self) -> [usize; 4] {
        let a = self.dim_xi();
        let b = a + self.dim_eta();
        let c = b + self.dim_alpha();
        [0, a, b, c]
    }

    pub fn names(&self) -> ParameterNames {
        let l = &self.layout;
        let f = l.f_names();
        let mut alpha = l.g_names();
        alpha.extend(self.kept_augmentation.iter().map(|&j| format!("q*{}", f[j])));
        ParameterNames {
            xi: std::iter::once("(intercept)".to_string())
                .chain(l.s_names.iter().cloned())
                .collect(),
            eta: std::iter::once("(intercept)".to_string())
                .chain(l.p_idx.iter().map(|&i| l.r_names[i].clone()))
                .collect(),
            alpha,
            beta: f,
        }
    }

    /// Effect design `D = [g, q·f (kept), A·f]` with clipped `q`.
    pub fn design(&self, row: &EstimationRow, q_clipped: f64) -> Vec<f64> {
        let g = self.layout.g_basis(&row.r);
        let f = self.layout.f_basis(&row.s);
        let a = f64::from(row.a);
        let mut d = g;
        d.extend(self.kept_augmentation.iter().map(|&j| q_clipped * f[j]));
        d.extend(f.iter().map(|v| a * v));
        d
    }

    /// Per-row quantities at `θ`.
    pub fn evaluate(&self, row: &EstimationRow, theta: &[f64]) -> RowTerms {
        let [o_xi, o_eta, o_ab, _] = self.offsets();
        let xq = self.layout.q_design(&row.s);
        let xp = self.layout.p_design(&row.r);
        let q = inv_logit(numeric::dot(&xq, &theta[o_xi..o_eta]));
        let p = inv_logit(numeric::dot(&xp, &theta[o_eta..o_ab]));
        let (w, clipped) = compute_weight(row.a, q, p, self.clip);
        let qc = clip_probability(q, self.clip).0;
        let d = self.design(row, qc);
        let fitted = numeric::dot(&d, &theta[o_ab..]);
        RowTerms {
            xq,
            xp,
            q,
            p,
            w,
            clipped,
            d,
            residual: row.y_future - fitted,
        }
    }

    /// Stacked score `[l; m; u]` of one row.
    pub fn row_score(&self, row: &EstimationRow, theta: &[f64]) -> Vec<f64> {
        let t = self.evaluate(row, theta);
        let a = f64::from(row.a);
        let mut out = Vec::with_capacity(self.dim());
        out.extend(t.xq.iter().map(|x| (a - t.q) * x));
        out.extend(t.xp.iter().map(|x| (a - t.p) * x));
        out.extend(t.d.iter().map(|x| t.w * t.residual * x));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowTerms {
    pub xq: Vec<f64>,
    pub xp: Vec<f64>,
    /// Unclipped propensities.
    pub q: f64,
    pub p: f64,
    pub w: f64,
    pub clipped: u32,
    pub d: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterNames {
    pub xi: Vec<String>,
    pub eta: Vec<String>,
    pub alpha: Vec<String>,
    pub beta: Vec<String>,
}

/// One panel's contribution to the stacked estimating equation.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedScore {
    /// Numerator propensity score block.
    pub l: Vec<f64>,
    /// Denominator propensity score block.
    pub m: Vec<f64>,
    /// Effect equation block.
    pub u: Vec<f64>,
}

impl StackedScore {
    pub fn concat(&self) -> Vec<f64> {
        self.l.iter().chain(&self.m).chain(&self.u).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rows: usize,
    pub n_panels: usize,
    pub contributing_panels: usize,
    pub clip: f64,
    pub clip_events: u64,
    pub numerator_converged: bool,
    pub numerator_iterations: usize,
    pub denominator_converged: bool,
    pub denominator_iterations: usize,
    /// True when `S = R` and one propensity fit serves both roles.
    pub shared_propensity: bool,
    pub numerator_qicu: f64,
    pub denominator_qicu: f64,
    /// `q·f` columns left out because they lie in the span of `g`.
    pub dropped_augmentation: Vec<String>,
    pub bread_condition: Option<f64>,
    pub max_abs_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Covariance of the full stacked parameter `(ξ, η, α, β)`.
    pub covariance: DMatrix<f64>,
    pub n_panels: usize,
    pub clip_events: u64,
    pub names: ParameterNames,
    pub structure: ModelStructure,
    pub diagnostics: Diagnostics,
}

impl ThetaEstimate {
    pub fn theta(&self) -> Vec<f64> {
        self.xi
            .iter()
            .chain(&self.eta)
            .chain(&self.alpha)
            .chain(&self.beta)
            .copied()
            .collect()
    }

    pub fn beta_covariance(&self) -> DMatrix<f64> {
        let o = self.structure.offsets()[3];
        let k = self.beta.len();
        self.covariance.view((o, o), (k, k)).into_owned()
    }

    pub fn beta_se(&self) -> Vec<f64> {
        let c = self.beta_covariance();
        (0..self.beta.len()).map(|i| c[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Fitted `q(S)` (unclipped).
    pub fn numerator(&self, row: &EstimationRow) -> f64 {
        inv_logit(numeric::dot(&self.structure.layout.q_design(&row.s), &self.xi))
    }

    /// Fitted `p(R)` (unclipped).
    pub fn denominator(&self, row: &EstimationRow) -> f64 {
        inv_logit(numeric::dot(&self.structure.layout.p_design(&row.r), &self.eta))
    }

    pub fn weight(&self, row: &EstimationRow) -> f64 {
        compute_weight(row.a, self.numerator(row), self.denominator(row), self.structure.clip).0
    }

    /// Fitted baseline `[g, q·f]'α` of a row, the outcome model under `A = 0`.
    pub fn baseline(&self, row: &EstimationRow) -> f64 {
        let q = clip_probability(self.numerator(row), self.structure.clip).0;
        let d = self.structure.design(row, q);
        numeric::dot(&d[..self.alpha.len()], &self.alpha)
    }
}

/// Per-panel stacked scores at `θ`; panels without rows get zero vectors.
pub fn stacked_score(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure) -> Vec<StackedScore> {
    let ranges = rows.panel_ranges();
    let (dx, de) = (structure.dim_xi(), structure.dim_eta());
    par::map_slice(&ranges, |range| {
        let per_row: Vec<Vec<f64>> = rows.rows[range.clone()]
            .iter()
            .map(|r| structure.row_score(r, theta))
            .collect();
        let total = numeric::sum_vectors(structure.dim(), per_row.iter().map(Vec::as_slice));
        StackedScore {
            l: total[..dx].to_vec(),
            m: total[dx..dx + de].to_vec(),
            u: total[dx + de..].to_vec(),
        }
    })
}

/// Sum of the per-panel scores.
pub fn total_score(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure) -> Vec<f64> {
    let per_panel: Vec<Vec<f64>> = stacked_score(rows, theta, structure).iter().map(StackedScore::concat).collect();
    numeric::sum_vectors(structure.dim(), per_panel.iter().map(Vec::as_slice))
}

fn design_matrix(n: usize, p: usize, row: impl Fn(usize) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, p);
    for i in 0..n {
        for (j, v) in row(i).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

fn glm_stage(stage: &'static str) -> impl Fn(GlmError) -> EstimateError {
    move |source| EstimateError::Glm { stage, source }
}

/// Fits `(ξ, η, α, β)` and, unless disabled, the sandwich covariance.
pub fn estimate(rows: &EstimationRows, options: &EstimateOptions) -> Result<ThetaEstimate, EstimateError> {
    if !(options.clip > 0.0 && options.clip < 0.5) {
        return Err(EstimateError::InvalidOption(format!("clip must lie in (0, 0.5), got {}", options.clip)));
    }
    if rows.is_empty() {
        return Err(EstimateError::NoRows);
    }
    let contributing = rows.contributing_panels();
    if contributing < 2 {
        return Err(EstimateError::TooFewPanels(contributing));
    }
    let layout = &rows.layout;
    let n = rows.len();
    let a: Vec<f64> = rows.rows.iter().map(|r| f64::from(r.a)).collect();

    let xq = design_matrix(n, 1 + layout.s_names.len(), |i| layout.q_design(&rows.rows[i].s));
    let numerator = glm::fit_logistic(&xq, &a).map_err(glm_stage("numerator propensity"))?;
    let shared = layout.s_equals_p();
    let xp = design_matrix(n, 1 + layout.p_idx.len(), |i| layout.p_design(&rows.rows[i].r));
    let denominator: LogisticFit = if shared {
        numerator.clone()
    } else {
        glm::fit_logistic(&xp, &a).map_err(glm_stage("denominator propensity"))?
    };

    // Weights and clipped numerator per row.
    let mut clip_events = 0u64;
    let mut w = Vec::with_capacity(n);
    let mut qc = Vec::with_capacity(n);
    for row in &rows.rows {
        let q = numerator.predict(&layout.q_design(&row.s));
        let p = denominator.predict(&layout.p_design(&row.r));
        let (wi, clipped) = compute_weight(row.a, q, p, options.clip);
        clip_events += u64::from(clipped);
        w.push(wi);
        qc.push(clip_probability(q, options.clip).0);
    }

    // Drop q·f columns that add nothing to the span of g (weighted).
    let n_f = 1 + layout.f_idx.len();
    let full = ModelStructure::new(layout.clone(), (0..n_f).collect(), options.clip);
    let n_g = 1 + layout.g_idx.len();
    let d_full = design_matrix(n, n_g + 2 * n_f, |i| full.design(&rows.rows[i], qc[i]));
    let mut scaled = d_full.clone();
    for (i, wi) in w.iter().enumerate() {
        scaled.row_mut(i).scale_mut(wi.sqrt());
    }
    let dependent = numeric::dependent_columns(&scaled, AUGMENTATION_TOLERANCE);
    if let Some(&bad) = dependent.iter().find(|&&j| j < n_g || j >= n_g + n_f) {
        return Err(EstimateError::Glm {
            stage: "effect",
            source: GlmError::RankDeficient { columns: vec![bad] },
        });
    }
    let kept: Vec<usize> = (0..n_f).filter(|j| !dependent.contains(&(n_g + j))).collect();
    let structure = ModelStructure::new(layout.clone(), kept.clone(), options.clip);
    let keep_cols: Vec<usize> = (0..n_g)
        .chain(kept.iter().map(|j| n_g + j))
        .chain(n_g + n_f..n_g + 2 * n_f)
        .collect();
    let d = d_full.select_columns(keep_cols.iter());
    let y: Vec<f64> = rows.rows.iter().map(|r| r.y_future).collect();
    let effect = glm::fit_wls(&d, &y, &w).map_err(glm_stage("effect"))?;
    let n_alpha = structure.dim_alpha();
    let alpha = effect.coefficients[..n_alpha].to_vec();
    let beta = effect.coefficients[n_alpha..].to_vec();

    let names = structure.names();
    let f_names = layout.f_names();
    let dropped_augmentation = (0..n_f)
        .filter(|j| !kept.contains(j))
        .map(|j| format!("q*{}", f_names[j]))
        .collect();

    let mut est = ThetaEstimate {
        xi: numerator.coefficients.clone(),
        eta: denominator.coefficients.clone(),
        alpha,
        beta,
        covariance: DMatrix::zeros(structure.dim(), structure.dim()),
        n_panels: rows.n_panels,
        clip_events,
        names,
        structure,
        diagnostics: Diagnostics {
            rows: n,
            n_panels: rows.n_panels,
            contributing_panels: contributing,
            clip: options.clip,
            clip_events,
            numerator_converged: numerator.converged,
            numerator_iterations: numerator.iterations,
            denominator_converged: denominator.converged,
            denominator_iterations: denominator.iterations,
            shared_propensity: shared,
            numerator_qicu: glm::qicu(&numerator, &xq, &a),
            denominator_qicu: glm::qicu(&denominator, &xp, &a),
            dropped_augmentation,
            bread_condition: None,
            max_abs_score: 0.0,
        },
    };
    let theta = est.theta();
    let total = total_score(rows, &theta, &est.structure);
    est.diagnostics.max_abs_score = total.iter().fold(0.0, |m, v| m.max(v.abs()));
    if options.covariance {
        let s = sandwich_covariance(rows, &theta, &est.structure)?;
        est.covariance = s.covariance;
        est.diagnostics.bread_condition = Some(s.bread_condition);
    }
    Ok(est)
}

/// Wald summary of `c'β` at the 95% level.
pub fn wald(est: &ThetaEstimate, contrast: &[f64]) -> Result<WaldReport, EstimateError> {
    wald_at_level(est, contrast, 0.95)
}

/// Wald summary of `c'β` with a two-sided interval at `level`.
pub fn wald_at_level(est: &ThetaEstimate, contrast: &[f64], level: f64) -> Result<WaldReport, EstimateError> {
    if contrast.len() != est.beta.len() {
        return Err(EstimateError::DimensionMismatch(format!(
            "contrast has {} entries, beta has {}",
            contrast.len(),
            est.beta.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimateError::InvalidOption(format!("level must lie in (0, 1), got {level}")));
    }
    let c = DVector::from_column_slice(contrast);
    let var = (c.transpose() * est.beta_covariance() * &c)[(0, 0)];
    let value = numeric::dot(contrast, &est.beta);
    WaldReport::new(value, var.max(0.0).sqrt(), contrast.to_vec(), level)
}
