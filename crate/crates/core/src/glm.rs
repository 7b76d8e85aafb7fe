//! Working-model fits: logistic regression by IRLS, weighted least squares, QICu.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::{self, inv_logit};

/// Convergence tolerance on the largest absolute coefficient update.
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITERATIONS: usize = 50;
/// Any coefficient beyond this magnitude on the logit scale is treated as separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("complete or quasi-complete separation (coefficient {coefficient} diverged)")]
    Separation { coefficient: usize },
    #[error("design is rank deficient; dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("IRLS did not converge in {iterations} iterations (last update {max_abs_update:e})")]
    NotConverged {
        iterations: usize,
        max_abs_update: f64,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_update: f64,
    pub log_quasi_likelihood: f64,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        predict_logistic(self, row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    /// Weighted residual sum of squares.
    pub residual_sum: f64,
    pub design_rank: usize,
}

fn check_shape(design: &DMatrix<f64>, n: usize) -> Result<(), GlmError> {
    if design.nrows() != n {
        return Err(GlmError::InvalidInput(format!(
            "design has {} rows but outcome has {n}",
            design.nrows()
        )));
    }
    if design.nrows() < design.ncols() {
        return Err(GlmError::InvalidInput(format!(
            "need at least as many rows ({}) as columns ({})",
            design.nrows(),
            design.ncols()
        )));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(GlmError::InvalidInput("design contains non-finite values".into()));
    }
    Ok(())
}

fn binomial_log_likelihood(design: &DMatrix<f64>, outcome: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    numeric::sum(eta.iter().zip(outcome).map(|(&z, &a)| {
        let mu = inv_logit(z);
        a * mu.ln() + (1.0 - a) * (1.0 - mu).ln()
    }))
}

/// Fits `P(a = 1 | x) = logit⁻¹(x'ξ)` by iteratively reweighted least squares.
///
/// Starts from zero, stops once the largest absolute update is at most
/// [`IRLS_TOLERANCE`], and gives up after [`IRLS_MAX_ITERATIONS`].
pub fn fit_logistic(design: &DMatrix<f64>, outcome: &[f64]) -> Result<LogisticFit, GlmError> {
    check_shape(design, outcome.len())?;
    if outcome.iter().any(|&a| a != 0.0 && a != 1.0) {
        return Err(GlmError::InvalidInput("outcome must be binary".into()));
    }
    let dependent = numeric::dependent_columns(design, RANK_TOLERANCE);
    if !dependent.is_empty() {
        return Err(GlmError::RankDeficient { columns: dependent });
    }
    let ones = outcome.iter().filter(|&&a| a == 1.0).count();
    if ones == 0 || ones == outcome.len() {
        return Err(GlmError::Separation { coefficient: 0 });
    }

    let (n, p) = design.shape();
    let y = DVector::from_column_slice(outcome);
    let mut beta = DVector::<f64>::zeros(p);
    let mut last_update = f64::INFINITY;
    for iteration in 1..=IRLS_MAX_ITERATIONS {
        let eta = design * &beta;
        let mu = eta.map(inv_logit);
        let w = mu.map(|m| m * (1.0 - m));
        // Newton step: (X'WX)^{-1} X'(y - mu), solved as weighted least squares on the
        // working residual to keep the conditioning of X rather than X'X.
        let mut xw = design.clone();
        let mut z = DVector::<f64>::zeros(n);
        for i in 0..n {
            let sw = w[i].sqrt();
            xw.row_mut(i).scale_mut(sw);
            z[i] = (y[i] - mu[i]) / sw;
        }
        let step = numeric::least_squares(&xw, &z).ok_or_else(|| GlmError::RankDeficient {
            columns: numeric::dependent_columns(&xw, RANK_TOLERANCE),
        })?;
        beta += &step;
        last_update = step.amax();
        if let Some(j) = beta.iter().position(|b| !b.is_finite() || b.abs() > SEPARATION_BOUND) {
            return Err(GlmError::Separation { coefficient: j });
        }
        if last_update <= IRLS_TOLERANCE {
            return Ok(LogisticFit {
                log_quasi_likelihood: binomial_log_likelihood(design, outcome, &beta),
                coefficients: beta.iter().copied().collect(),
                converged: true,
                iterations: iteration,
                max_abs_update: last_update,
            });
        }
    }
    Err(GlmError::NotConverged {
        iterations: IRLS_MAX_ITERATIONS,
        max_abs_update: last_update,
    })
}

/// `logit⁻¹(row · coefficients)`, strictly inside (0, 1).
pub fn predict_logistic(fit: &LogisticFit, row: &[f64]) -> f64 {
    inv_logit(numeric::dot(row, &fit.coefficients))
}

/// Solves `Σ wᵢ xᵢ (yᵢ − xᵢ'θ) = 0` by QR of the row-scaled design.
pub fn fit_wls(design: &DMatrix<f64>, outcome: &[f64], weights: &[f64]) -> Result<WlsFit, GlmError> {
    check_shape(design, outcome.len())?;
    if weights.len() != outcome.len() {
        return Err(GlmError::InvalidInput("weights and outcome lengths differ".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(GlmError::InvalidInput("weights must be finite and non-negative".into()));
    }
    let mut xw = design.clone();
    let mut yw = DVector::<f64>::zeros(outcome.len());
    for (i, (&y, &w)) in outcome.iter().zip(weights).enumerate() {
        let sw = w.sqrt();
        xw.row_mut(i).scale_mut(sw);
        yw[i] = y * sw;
    }
    let dependent = numeric::dependent_columns(&xw, RANK_TOLERANCE);
    if !dependent.is_empty() {
        return Err(GlmError::RankDeficient { columns: dependent });
    }
    let theta = numeric::least_squares(&xw, &yw).ok_or_else(|| GlmError::RankDeficient {
        columns: (0..design.ncols()).collect(),
    })?;
    let resid = &yw - &xw * &theta;
    Ok(WlsFit {
        residual_sum: numeric::sum(resid.iter().map(|r| r * r)),
        coefficients: theta.iter().copied().collect(),
        design_rank: design.ncols(),
    })
}

/// QICu = −2·QL + 2p with the binomial quasi-likelihood at the fitted means.
pub fn qicu(fit: &LogisticFit, design: &DMatrix<f64>, outcome: &[f64]) -> f64 {
    let beta = DVector::from_column_slice(&fit.coefficients);
    -2.0 * binomial_log_likelihood(design, outcome, &beta) + 2.0 * fit.coefficients.len() as f64
}

/// Logistic score `Σ (aᵢ − μᵢ) xᵢ` at the given coefficients.
pub fn logistic_score(design: &DMatrix<f64>, outcome: &[f64], coefficients: &[f64]) -> Vec<f64> {
    let beta = DVector::from_column_slice(coefficients);
    let eta = design * beta;
    let mut score = vec![0.0; design.ncols()];
    for (i, &a) in outcome.iter().enumerate() {
        let r = a - inv_logit(eta[i]);
        for (j, s) in score.iter_mut().enumerate() {
            *s += r * design[(i, j)];
        }
    }
    score
}
