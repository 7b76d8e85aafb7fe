use nalgebra::{DMatrix, DVector};

use super::{stacked_score, total_score, EstimateError, ModelStructure, StackedScore, FD_STEP, MAX_BREAD_CONDITION};
use crate::numeric;
use crate::panel::EstimationRows;

/// Bread, meat and the resulting covariance `(1/n) B⁻¹ C B⁻ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// `B_n = (1/n) Σ ∂ψ/∂θ`.
    pub bread: DMatrix<f64>,
    /// `C_n = (1/n) Σ ψ ψ'`.
    pub meat: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub bread_condition: f64,
}

fn central_difference(
    rows: &EstimationRows,
    theta: &[f64],
    structure: &ModelStructure,
    j: usize,
    rel_step: f64,
) -> Vec<f64> {
    let h = rel_step * theta[j].abs().max(1.0);
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    plus[j] += h;
    minus[j] -= h;
    let sp = total_score(rows, &plus, structure);
    let sm = total_score(rows, &minus, structure);
    sp.iter().zip(&sm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `Σ_rows ∂ψ/∂θ` with analytic diagonal blocks and finite-difference cross
/// blocks `∂u/∂ξ`, `∂u/∂η`.
pub fn stacked_jacobian(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure) -> DMatrix<f64> {
    let dim = structure.dim();
    let [_, o_eta, o_ab, _] = structure.offsets();
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for row in &rows.rows {
        let t = structure.evaluate(row, theta);
        let vq = t.q * (1.0 - t.q);
        for (i, xi) in t.xq.iter().enumerate() {
            for (j, xj) in t.xq.iter().enumerate() {
                jac[(i, j)] -= vq * xi * xj;
            }
        }
        let vp = t.p * (1.0 - t.p);
        for (i, xi) in t.xp.iter().enumerate() {
            for (j, xj) in t.xp.iter().enumerate() {
                jac[(o_eta + i, o_eta + j)] -= vp * xi * xj;
            }
        }
        for (i, di) in t.d.iter().enumerate() {
            for (j, dj) in t.d.iter().enumerate() {
                jac[(o_ab + i, o_ab + j)] -= t.w * di * dj;
            }
        }
    }
    for j in 0..o_ab {
        let col = central_difference(rows, theta, structure, j, FD_STEP);
        for i in o_ab..dim {
            jac[(i, j)] = col[i];
        }
    }
    jac
}

/// Full central-difference Jacobian of the summed stacked score.
pub fn numerical_jacobian(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure, rel_step: f64) -> DMatrix<f64> {
    let dim = structure.dim();
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let col = central_difference(rows, theta, structure, j, rel_step);
        jac.set_column(j, &DVector::from_vec(col));
    }
    jac
}

/// `C_n = (1/n) Σ_panels ψ ψ'`.
pub fn meat_matrix(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure) -> DMatrix<f64> {
    let n = rows.n_panels as f64;
    let dim = structure.dim();
    let scores: Vec<Vec<f64>> = stacked_score(rows, theta, structure).iter().map(StackedScore::concat).collect();
    let mut meat = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let v = numeric::sum(scores.iter().map(|s| s[i] * s[j])) / n;
            meat[(i, j)] = v;
            meat[(j, i)] = v;
        }
    }
    meat
}

/// Sandwich covariance at the fitted `θ`. Panels without rows count toward `n`.
pub fn sandwich_covariance(rows: &EstimationRows, theta: &[f64], structure: &ModelStructure) -> Result<Sandwich, EstimateError> {
    if theta.len() != structure.dim() {
        return Err(EstimateError::DimensionMismatch(format!(
            "theta has {} entries, expected {}",
            theta.len(),
            structure.dim()
        )));
    }
    let n = rows.n_panels as f64;
    let bread = stacked_jacobian(rows, theta, structure) / n;
    let meat = meat_matrix(rows, theta, structure);
    let condition = numeric::condition_number(&bread);
    if condition.is_nan() || condition > MAX_BREAD_CONDITION {
        return Err(EstimateError::SingularBread { condition });
    }
    let inv = bread
        .clone()
        .try_inverse()
        .ok_or(EstimateError::SingularBread { condition })?;
    let cov = &inv * &meat * inv.transpose() / n;
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(Sandwich {
        bread,
        meat,
        covariance,
        bread_condition: condition,
    })
}
