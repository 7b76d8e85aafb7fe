//! Efficient-score estimator for the case `S = R`.
//!
//! Solves `Σ (f/σ)(A − ρ)(Y − μ − A f'β) = 0` with plug-in nuisances:
//! `ρ` the fitted propensity, `μ` the control-arm outcome regression and
//! `σ = (1 − ρ) v₁ + ρ v₀` built from per-arm squared-residual regressions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{clip_probability, ThetaEstimate, DEFAULT_CLIP};
use crate::glm::{self, GlmError};
use crate::numeric;
use crate::panel::EstimationRows;

/// Lower bound on the conditional variances, relative to the outcome variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EfficientError {
    #[error("the efficient score requires S to equal R")]
    NotSEqualsR,
    #[error("no control rows (A = 0) to fit the baseline")]
    NoControlRows,
    #[error("no treated rows (A = 1) to fit the treated-arm variance")]
    NoTreatedRows,
    #[error("{stage} fit failed: {source}")]
    Glm {
        stage: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("efficient-score system is singular")]
    Singular,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Source of the baseline `μ(R)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BaselineSource {
    /// Least squares of `Y` on `g(R)` among control rows.
    #[default]
    ControlRegression,
    /// One value per row.
    Supplied(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceModel {
    /// Squared-residual regressions on `g(R)` per arm.
    #[default]
    ArmRegression,
    /// `σ ≡ 1`.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficientOptions {
    pub baseline: BaselineSource,
    pub variance: VarianceModel,
    /// Clipping applied to `ρ`.
    pub clip: f64,
}

impl Default for EfficientOptions {
    fn default() -> Self {
        Self {
            baseline: BaselineSource::ControlRegression,
            variance: VarianceModel::ArmRegression,
            clip: DEFAULT_CLIP,
        }
    }
}

/// Per-row nuisance values plus the fitted coefficients that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EfficientNuisances {
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho_coefficients: Vec<f64>,
    pub mu_coefficients: Option<Vec<f64>>,
    /// Variance regressions for arms `[0, 1]`.
    pub variance_coefficients: Option<[Vec<f64>; 2]>,
    pub variance_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficientFit {
    pub beta: Vec<f64>,
    /// Plug-in sandwich covariance of `β` (nuisances treated as known).
    pub covariance: DMatrix<f64>,
    /// `tr Cov(β_eff) / tr Cov(β_main)`; `None` without a main estimate.
    pub variance_ratio_vs_main: Option<f64>,
    pub nuisances: EfficientNuisances,
    pub max_abs_score: f64,
}

fn matrix(rows: usize, cols: usize, fill: impl Fn(usize) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for (j, v) in fill(i).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

fn least_squares_on(x: &DMatrix<f64>, y: &[f64], subset: &[usize], stage: &'static str) -> Result<Vec<f64>, EfficientError> {
    let sub = x.select_rows(subset.iter());
    let ys: Vec<f64> = subset.iter().map(|&i| y[i]).collect();
    let ones = vec![1.0; ys.len()];
    glm::fit_wls(&sub, &ys, &ones)
        .map(|f| f.coefficients)
        .map_err(|source| EfficientError::Glm { stage, source })
}

/// Fits the nuisances and solves the efficient-score equation.
pub fn fit_efficient(rows: &EstimationRows, options: &EfficientOptions) -> Result<EfficientFit, EfficientError> {
    let layout = &rows.layout;
    if !layout.s_equals_p() {
        return Err(EfficientError::NotSEqualsR);
    }
    let n = rows.len();
    let a: Vec<f64> = rows.rows.iter().map(|r| f64::from(r.a)).collect();
    let y: Vec<f64> = rows.rows.iter().map(|r| r.y_future).collect();
    let control: Vec<usize> = (0..n).filter(|&i| rows.rows[i].a == 0).collect();
    let treated: Vec<usize> = (0..n).filter(|&i| rows.rows[i].a == 1).collect();
    if control.is_empty() {
        return Err(EfficientError::NoControlRows);
    }

    let xp = matrix(n, 1 + layout.p_idx.len(), |i| layout.p_design(&rows.rows[i].r));
    let rho_fit = glm::fit_logistic(&xp, &a).map_err(|source| EfficientError::Glm {
        stage: "propensity",
        source,
    })?;
    let rho: Vec<f64> = (0..n)
        .map(|i| clip_probability(rho_fit.predict(&layout.p_design(&rows.rows[i].r)), options.clip).0)
        .collect();

    let g = matrix(n, 1 + layout.g_idx.len(), |i| layout.g_basis(&rows.rows[i].r));
    let predict = |coef: &[f64], i: usize| numeric::dot(&layout.g_basis(&rows.rows[i].r), coef);
    let (mu, mu_coefficients) = match &options.baseline {
        BaselineSource::Supplied(mu) => {
            if mu.len() != n {
                return Err(EfficientError::DimensionMismatch(format!(
                    "{} baseline values for {n} rows",
                    mu.len()
                )));
            }
            (mu.clone(), None)
        }
        BaselineSource::ControlRegression => {
            let coef = least_squares_on(&g, &y, &control, "baseline")?;
            ((0..n).map(|i| predict(&coef, i)).collect(), Some(coef))
        }
    };

    let (_, var_y) = numeric::mean_var(&y);
    let floor = VARIANCE_FLOOR * var_y;
    let (sigma, variance_coefficients) = match options.variance {
        VarianceModel::Constant => (vec![1.0; n], None),
        VarianceModel::ArmRegression => {
            if treated.is_empty() {
                return Err(EfficientError::NoTreatedRows);
            }
            let treated_mean = least_squares_on(&g, &y, &treated, "treated mean")?;
            let sq: Vec<f64> = (0..n)
                .map(|i| {
                    let m = if a[i] == 1.0 { predict(&treated_mean, i) } else { mu[i] };
                    (y[i] - m).powi(2)
                })
                .collect();
            let v0 = least_squares_on(&g, &sq, &control, "control variance")?;
            let v1 = least_squares_on(&g, &sq, &treated, "treated variance")?;
            let sigma = (0..n)
                .map(|i| {
                    let var0 = predict(&v0, i).max(floor);
                    let var1 = predict(&v1, i).max(floor);
                    (1.0 - rho[i]) * var1 + rho[i] * var0
                })
                .collect();
            (sigma, Some([v0, v1]))
        }
    };

    let nuisances = EfficientNuisances {
        rho,
        mu,
        sigma,
        rho_coefficients: rho_fit.coefficients,
        mu_coefficients,
        variance_coefficients,
        variance_floor: floor,
    };
    let (beta, covariance) = solve_efficient(rows, &nuisances)?;
    let score = efficient_score(rows, &beta, &nuisances);
    let total = numeric::sum_vectors(beta.len(), score.iter().map(Vec::as_slice));
    Ok(EfficientFit {
        max_abs_score: total.iter().fold(0.0, |m, v| m.max(v.abs())),
        beta,
        covariance,
        variance_ratio_vs_main: None,
        nuisances,
    })
}

/// [`fit_efficient`] plus the variance ratio against a main-estimator fit on the same rows.
pub fn fit_efficient_vs_main(
    rows: &EstimationRows,
    main: &ThetaEstimate,
    options: &EfficientOptions,
) -> Result<EfficientFit, EfficientError> {
    let mut fit = fit_efficient(rows, options)?;
    let main_cov = main.beta_covariance();
    if main_cov.nrows() != fit.beta.len() {
        return Err(EfficientError::DimensionMismatch("beta dimensions differ".into()));
    }
    let denom = main_cov.trace();
    if denom > 0.0 {
        fit.variance_ratio_vs_main = Some(fit.covariance.trace() / denom);
    }
    Ok(fit)
}

/// Main-estimator baseline `[g, q·f]'α̂` for every row.
pub fn main_baseline(rows: &EstimationRows, main: &ThetaEstimate) -> Vec<f64> {
    rows.rows.iter().map(|r| main.baseline(r)).collect()
}

/// Per-panel efficient scores at `β`.
pub fn efficient_score(rows: &EstimationRows, beta: &[f64], nuisances: &EfficientNuisances) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; beta.len()]; rows.n_panels];
    let mut acc: Vec<Vec<numeric::CompensatedSum>> = vec![vec![numeric::CompensatedSum::new(); beta.len()]; rows.n_panels];
    for (i, row) in rows.rows.iter().enumerate() {
        let f = rows.layout.f_basis(&row.s);
        let a = f64::from(row.a);
        let e = row.y_future - nuisances.mu[i] - a * numeric::dot(&f, beta);
        let c = (a - nuisances.rho[i]) * e / nuisances.sigma[i];
        for (s, fj) in acc[row.panel].iter_mut().zip(&f) {
            s.add(c * fj);
        }
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        for (v, s) in o.iter_mut().zip(a) {
            *v = s.value();
        }
    }
    out
}

/// Closed-form root of the efficient-score equation and its plug-in sandwich.
pub fn solve_efficient(rows: &EstimationRows, nuisances: &EfficientNuisances) -> Result<(Vec<f64>, DMatrix<f64>), EfficientError> {
    let n = rows.len();
    if nuisances.rho.len() != n || nuisances.mu.len() != n || nuisances.sigma.len() != n {
        return Err(EfficientError::DimensionMismatch("nuisance vectors must have one entry per row".into()));
    }
    let p = 1 + rows.layout.f_idx.len();
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (i, row) in rows.rows.iter().enumerate() {
        let f = rows.layout.f_basis(&row.s);
        let a = f64::from(row.a);
        let c = (a - nuisances.rho[i]) / nuisances.sigma[i];
        for j in 0..p {
            b[j] += c * f[j] * (row.y_future - nuisances.mu[i]);
            for k in 0..p {
                m[(j, k)] += c * a * f[j] * f[k];
            }
        }
    }
    let lu = m.clone().lu();
    let beta = lu.solve(&b).ok_or(EfficientError::Singular)?;
    let beta: Vec<f64> = beta.iter().copied().collect();
    let scores = efficient_score(rows, &beta, nuisances);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for s in &scores {
        let v = DVector::from_column_slice(s);
        meat += &v * v.transpose();
    }
    let inv = m.try_inverse().ok_or(EfficientError::Singular)?;
    let cov = &inv * meat * inv.transpose();
    Ok((beta, (&cov + cov.transpose()) * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate, EstimateOptions};
    use crate::panel::{build_rows, FeatureSpec, TermSpec};
    use crate::sim::{simulate_panels, ContextKernel, LinearIndex, NoiseKind, OutcomeKernel, ProbabilityKernel, Scenario, ScenarioSpec};

    fn rows(n: usize, seed: u64) -> EstimationRows {
        let s = Scenario::new(ScenarioSpec {
            label: "eff".into(),
            k_max: 6,
            positivity_floor: 0.05,
            context: vec![ContextKernel::bernoulli("x", LinearIndex::constant(0.0))],
            decision: ProbabilityKernel::logit(LinearIndex::constant(-0.3).with(0.9, &["x:x"]).unwrap()),
            outcome: OutcomeKernel::new(
                LinearIndex::constant(0.5)
                    .with(1.0, &["x:x@1"])
                    .unwrap()
                    .with(0.8, &["a@1"])
                    .unwrap(),
                NoiseKind::Gaussian,
                LinearIndex::constant(1.0).with(2.0, &["x:x@1"]).unwrap(),
            ),
            continuation: ProbabilityKernel::always(),
        })
        .unwrap();
        let spec = FeatureSpec::new(1, vec![TermSpec::Current { column: "x".into() }]).with_s(&["x"]).with_f(&[]);
        build_rows(&simulate_panels(&s, n, seed), &spec).unwrap()
    }

    #[test]
    fn requires_s_equal_r() {
        let mut r = rows(50, 1);
        r.layout.s_in_r.clear();
        r.layout.s_names.clear();
        assert_eq!(fit_efficient(&r, &EfficientOptions::default()), Err(EfficientError::NotSEqualsR));
    }

    #[test]
    fn score_root_floor_and_scale_invariance() {
        let r = rows(400, 2);
        let fit = fit_efficient(&r, &EfficientOptions::default()).unwrap();
        assert!(fit.max_abs_score <= 1e-8 * r.len() as f64);
        assert!(fit.nuisances.sigma.iter().all(|&s| s >= fit.nuisances.variance_floor));
        let mut scaled = fit.nuisances.clone();
        scaled.sigma.iter_mut().for_each(|s| *s *= 7.5);
        let (b2, _) = solve_efficient(&r, &scaled).unwrap();
        for (x, y) in fit.beta.iter().zip(&b2) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn noiseless_exact_root() {
        let mut r = rows(200, 3);
        for row in r.rows.iter_mut() {
            row.y_future = 2.0 - 0.5 * row.r[0] + 1.25 * f64::from(row.a);
        }
        let fit = fit_efficient(&r, &EfficientOptions::default()).unwrap();
        assert!((fit.beta[0] - 1.25).abs() < 1e-10);
    }

    #[test]
    fn matches_main_with_its_baseline_and_constant_sigma() {
        let r = rows(300, 4);
        let main = estimate(&r, &EstimateOptions::default()).unwrap();
        let opts = EfficientOptions {
            baseline: BaselineSource::Supplied(main_baseline(&r, &main)),
            variance: VarianceModel::Constant,
            ..EfficientOptions::default()
        };
        let fit = fit_efficient_vs_main(&r, &main, &opts).unwrap();
        assert!((fit.beta[0] - main.beta[0]).abs() < 1e-8);
        assert!(fit.variance_ratio_vs_main.unwrap() > 0.0);
    }

    #[test]
    fn no_controls() {
        let mut r = rows(50, 5);
        r.rows.iter_mut().for_each(|row| row.a = 1);
        assert_eq!(fit_efficient(&r, &EfficientOptions::default()), Err(EfficientError::NoControlRows));
    }
}
