//! Replication studies on simulated panels.
//!
//! Every replicate draws its panels from `derive_seed(stream, r)`, so a study is
//! a pure function of its inputs and produces identical numbers at any thread
//! count.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::efficient::{fit_efficient, EfficientError, EfficientOptions};
use crate::estimator::{estimate, wald, EstimateError, EstimateOptions};
use crate::glm::{self, GlmError};
use crate::numeric::{self, CompensatedSum};
use crate::panel::{build_rows, EstimationRows, FeatureSpec, PanelError};
use crate::par;
use crate::sim::{derive_seed, oracle_lag_effect, simulate_panels, Conditioning, OracleEstimate, SCondition, Scenario, SimError};

/// Asymptotic 1% critical value of the Kolmogorov statistic `√n D`.
pub const KS_CRITICAL_1PCT: f64 = 1.6276;
/// Distinct `(k, S)` combinations allowed when computing a population target.
const MAX_TARGET_CELLS: usize = 500;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Efficient(#[from] EfficientError),
    #[error("population target: {0}")]
    Target(String),
    #[error("invalid study input: {0}")]
    Invalid(String),
}

/// Scenario, working models and the contrast of `β` being studied.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationDesign {
    pub scenario: Scenario,
    pub features: FeatureSpec,
    pub contrast: Vec<f64>,
    pub options: EstimateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub clip_events: u64,
}

/// Replicates that succeeded, plus the error message of each failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRun {
    pub n_panels: usize,
    pub outcomes: Vec<ReplicateOutcome>,
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub n_panels: usize,
    pub replications: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub bias: f64,
    /// `sd / √replications`.
    pub se_of_mean: f64,
    pub rmse: f64,
    pub mean_se: f64,
    /// `mean_se / sd`.
    pub se_ratio: f64,
    pub coverage: f64,
    /// Share of replicates with `p < 0.05`.
    pub rejection_rate: f64,
    /// Kolmogorov statistic of the p-values against U(0, 1).
    pub ks_statistic: f64,
    pub ks_critical_1pct: f64,
}

impl ReplicationSummary {
    /// `|bias| ≤ 3 · se_of_mean`.
    pub fn unbiased(&self) -> bool {
        self.bias.abs() <= 3.0 * self.se_of_mean
    }
}

fn stream_seed(seed: u64, n_panels: usize) -> u64 {
    derive_seed(seed, n_panels as u64)
}

/// Fits one replicate's panel set and returns the Wald summary of the contrast.
pub fn fit_replicate(design: &ReplicationDesign, n_panels: usize, seed: u64) -> Result<ReplicateOutcome, StudyError> {
    let panels = simulate_panels(&design.scenario, n_panels, seed);
    let rows = build_rows(&panels, &design.features)?;
    let est = estimate(&rows, &design.options)?;
    let w = wald(&est, &design.contrast)?;
    Ok(ReplicateOutcome {
        index: 0,
        estimate: w.estimate,
        std_error: w.std_error,
        ci_low: w.ci_low,
        ci_high: w.ci_high,
        p_value: w.p_value,
        clip_events: est.clip_events,
    })
}

/// Runs `replications` independent datasets of `n_panels` panels each.
pub fn run_replications(design: &ReplicationDesign, n_panels: usize, replications: usize, seed: u64) -> ReplicationRun {
    let stream = stream_seed(seed, n_panels);
    let results = par::map_indexed(replications, |r| fit_replicate(design, n_panels, derive_seed(stream, r as u64)));
    let mut outcomes = Vec::with_capacity(replications);
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(mut o) => {
                o.index = r;
                outcomes.push(o);
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    ReplicationRun {
        n_panels,
        outcomes,
        failures,
    }
}

/// Kolmogorov distance between the empirical CDF of `p` and U(0, 1).
pub fn ks_uniform(p: &[f64]) -> f64 {
    let mut v = p.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let lo = x - i as f64 / n;
        let hi = (i + 1) as f64 / n - x;
        d.max(lo).max(hi)
    })
}

pub fn summarize(run: &ReplicationRun, truth: f64) -> ReplicationSummary {
    let est: Vec<f64> = run.outcomes.iter().map(|o| o.estimate).collect();
    let n = est.len();
    let (mean, var) = numeric::mean_var(&est);
    let sd = var.sqrt();
    let frac = |f: &dyn Fn(&ReplicateOutcome) -> bool| run.outcomes.iter().filter(|o| f(o)).count() as f64 / n as f64;
    let p: Vec<f64> = run.outcomes.iter().map(|o| o.p_value).collect();
    ReplicationSummary {
        n_panels: run.n_panels,
        replications: n,
        failures: run.failures.len(),
        truth,
        mean,
        sd,
        bias: mean - truth,
        se_of_mean: sd / (n as f64).sqrt(),
        rmse: (numeric::sum(est.iter().map(|e| (e - truth).powi(2))) / n as f64).sqrt(),
        mean_se: numeric::sum(run.outcomes.iter().map(|o| o.std_error)) / n as f64,
        se_ratio: numeric::sum(run.outcomes.iter().map(|o| o.std_error)) / n as f64 / sd,
        coverage: frac(&|o| o.ci_low <= truth && truth <= o.ci_high),
        rejection_rate: frac(&|o| o.p_value < 0.05),
        ks_statistic: ks_uniform(&p),
        ks_critical_1pct: KS_CRITICAL_1PCT / (n as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub summaries: Vec<ReplicationSummary>,
    /// `rmse(n_i) / rmse(n_{i+1})` for consecutive grid points.
    pub rmse_ratios: Vec<f64>,
}

/// Bias, RMSE, standard-error calibration and coverage across a grid of panel counts.
pub fn consistency_suite(
    design: &ReplicationDesign,
    grid: &[usize],
    replications: usize,
    seed: u64,
    truth: f64,
) -> ConsistencyReport {
    let summaries: Vec<ReplicationSummary> = grid
        .iter()
        .map(|&n| summarize(&run_replications(design, n, replications, seed), truth))
        .collect();
    let rmse_ratios = summaries.windows(2).map(|w| w[0].rmse / w[1].rmse).collect();
    ConsistencyReport { summaries, rmse_ratios }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub label: String,
    pub outcome_model_correct: bool,
    pub propensity_model_correct: bool,
    pub summary: ReplicationSummary,
    /// `None` for the cell with both models wrong.
    pub pass: Option<bool>,
}

/// Baseline and denominator feature lists for the four model combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessModels {
    pub correct_g: Vec<String>,
    pub wrong_g: Vec<String>,
    pub correct_p: Vec<String>,
    pub wrong_p: Vec<String>,
}

/// The four-cell double-robustness table against a common truth.
pub fn double_robustness_suite(
    design: &ReplicationDesign,
    models: &RobustnessModels,
    n_panels: usize,
    replications: usize,
    seed: u64,
    truth: f64,
) -> Vec<RobustnessCell> {
    let cells = [(true, true), (true, false), (false, true), (false, false)];
    cells
        .iter()
        .map(|&(g_ok, p_ok)| {
            let mut features = design.features.clone();
            features.g_features = Some(if g_ok { &models.correct_g } else { &models.wrong_g }.clone());
            features.p_features = Some(if p_ok { &models.correct_p } else { &models.wrong_p }.clone());
            let d = ReplicationDesign {
                features,
                ..design.clone()
            };
            let summary = summarize(&run_replications(&d, n_panels, replications, seed), truth);
            let label = match (g_ok, p_ok) {
                (true, true) => "both correct",
                (true, false) => "outcome correct only",
                (false, true) => "propensity correct only",
                (false, false) => "both wrong",
            };
            RobustnessCell {
                label: label.into(),
                outcome_model_correct: g_ok,
                propensity_model_correct: p_ok,
                pass: (g_ok || p_ok).then(|| summary.unbiased()),
                summary,
            }
        })
        .collect()
}

/// Pitman–Morgan test of `Var(x) = Var(y)` for paired samples; positive when `Var(x) > Var(y)`.
pub fn pitman_morgan(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let s: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let (md, vd) = numeric::mean_var(&d);
    let (ms, vs) = numeric::mean_var(&s);
    let n = d.len() as f64;
    let cov = numeric::sum(d.iter().zip(&s).map(|(a, b)| (a - md) * (b - ms))) / (n - 1.0);
    let r = cov / (vd * vs).sqrt();
    r * (n - 2.0).sqrt() / (1.0 - r * r).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub n_panels: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_main: f64,
    pub mean_efficient: f64,
    pub var_main: f64,
    pub var_efficient: f64,
    /// `var_efficient / var_main`.
    pub variance_ratio: f64,
    /// Pitman–Morgan statistic; large positive values favor the efficient estimator.
    pub pitman_morgan: f64,
}

/// Paired replications of the main and efficient estimators (first `β` component).
pub fn efficiency_suite(
    scenario: &Scenario,
    features: &FeatureSpec,
    n_panels: usize,
    replications: usize,
    seed: u64,
) -> Result<EfficiencyReport, StudyError> {
    let stream = stream_seed(seed, n_panels);
    let results = par::map_indexed(replications, |r| -> Result<(f64, f64), StudyError> {
        let panels = simulate_panels(scenario, n_panels, derive_seed(stream, r as u64));
        let rows = build_rows(&panels, features)?;
        let main = estimate(
            &rows,
            &EstimateOptions {
                covariance: false,
                ..EstimateOptions::default()
            },
        )?;
        let eff = fit_efficient(&rows, &EfficientOptions::default())?;
        Ok((main.beta[0], eff.beta[0]))
    });
    let mut main = Vec::new();
    let mut eff = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok((a, b)) => {
                main.push(a);
                eff.push(b);
            }
            Err(StudyError::Efficient(EfficientError::NotSEqualsR)) => return Err(EfficientError::NotSEqualsR.into()),
            Err(_) => failures += 1,
        }
    }
    if main.len() < 3 {
        return Err(StudyError::Invalid("fewer than 3 successful replicates".into()));
    }
    let (mean_main, var_main) = numeric::mean_var(&main);
    let (mean_efficient, var_efficient) = numeric::mean_var(&eff);
    Ok(EfficiencyReport {
        n_panels,
        replications: main.len(),
        failures,
        mean_main,
        mean_efficient,
        var_main,
        var_efficient,
        variance_ratio: var_efficient / var_main,
        pitman_morgan: pitman_morgan(&main, &eff),
    })
}

/// Overlap-weighted limit `β∞ = G⁻¹ g` with `G = E Σ q(1−q) f f'`, `g = E Σ q(1−q) f ζ_marg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTarget {
    pub beta: Vec<f64>,
    /// Monte Carlo standard errors of `beta` from the oracle cells.
    pub se: Vec<f64>,
    pub numerator_coefficients: Vec<f64>,
    /// `(k, S value, weight per panel, oracle)` for every cell.
    pub cells: Vec<TargetCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCell {
    pub k: usize,
    pub s: Vec<f64>,
    /// Expected number of rows per panel in this cell.
    pub rows_per_panel: f64,
    pub effect: OracleEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSettings {
    /// Panels used to approximate the limiting numerator propensity and row distribution.
    pub panels: usize,
    /// World pairs per oracle cell.
    pub oracle_replicates: usize,
    pub seed: u64,
}

/// Computes the overlap-weighted limit of `β` for a design with discrete `S`.
///
/// Oracle cells condition only on `(k, S)`, which is exact when the
/// continuation kernel does not depend on the decision.
pub fn population_target(design: &ReplicationDesign, settings: &TargetSettings) -> Result<PopulationTarget, StudyError> {
    let panels = simulate_panels(&design.scenario, settings.panels, derive_seed(settings.seed, 0));
    let rows = build_rows(&panels, &design.features)?;
    if rows.is_empty() {
        return Err(StudyError::Target("no rows in the reference sample".into()));
    }
    let layout = &rows.layout;
    let n = rows.len();
    let a: Vec<f64> = rows.rows.iter().map(|r| f64::from(r.a)).collect();
    let mut xq = DMatrix::zeros(n, 1 + layout.s_names.len());
    for (i, r) in rows.rows.iter().enumerate() {
        for (j, v) in layout.q_design(&r.s).into_iter().enumerate() {
            xq[(i, j)] = v;
        }
    }
    let numerator = glm::fit_logistic(&xq, &a).map_err(|e: GlmError| StudyError::Target(e.to_string()))?;

    // Row counts per (k, S) cell, in first-seen order for determinism.
    let mut keys: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in &rows.rows {
        let key = (r.k, r.s.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<_>>());
        match keys.iter().position(|k| *k == key) {
            Some(i) => counts[i] += 1,
            None => {
                if keys.len() == MAX_TARGET_CELLS {
                    return Err(StudyError::Target("S must take few distinct values".into()));
                }
                keys.push(key);
                counts.push(1);
                values.push(r.s.clone());
            }
        }
    }
    let lag = design.features.lag;
    let effects = par::map_indexed(keys.len(), |i| {
        let cond = Conditioning {
            terms: design.features.terms.clone(),
            n_lagged_actions: design.features.n_lagged_actions,
            r_cells: Vec::new(),
            s_bin: layout
                .s_names
                .iter()
                .zip(&values[i])
                .map(|(name, &value)| SCondition::Equals {
                    name: name.clone(),
                    value,
                })
                .collect(),
        };
        oracle_lag_effect(
            &design.scenario,
            keys[i].0,
            lag,
            &cond,
            settings.oracle_replicates,
            derive_seed(settings.seed, 1 + i as u64),
        )
    });

    let nf = 1 + layout.f_idx.len();
    let per_panel = settings.panels as f64;
    let mut big_g = DMatrix::<f64>::zeros(nf, nf);
    let mut small_g = vec![CompensatedSum::new(); nf];
    let mut var_g = DMatrix::<f64>::zeros(nf, nf);
    let mut cells = Vec::with_capacity(keys.len());
    for (i, effect) in effects.into_iter().enumerate() {
        let effect = effect?;
        let s = &values[i];
        let q = numerator.predict(&layout.q_design(s));
        let f = DVector::from_vec(layout.f_basis(s));
        let weight = counts[i] as f64 / per_panel;
        let c = weight * q * (1.0 - q);
        big_g += &f * f.transpose() * c;
        for (acc, fj) in small_g.iter_mut().zip(f.iter()) {
            acc.add(c * fj * effect.value);
        }
        var_g += &f * f.transpose() * (c * effect.mc_se).powi(2);
        cells.push(TargetCell {
            k: keys[i].0,
            s: s.clone(),
            rows_per_panel: weight,
            effect,
        });
    }
    let inv = big_g
        .try_inverse()
        .ok_or_else(|| StudyError::Target("overlap moment matrix is singular".into()))?;
    let g = DVector::from_vec(small_g.iter().map(CompensatedSum::value).collect());
    let beta = &inv * g;
    let cov = &inv * var_g * inv.transpose();
    Ok(PopulationTarget {
        beta: beta.iter().copied().collect(),
        se: (0..nf).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        numerator_coefficients: numerator.coefficients,
        cells,
    })
}

/// Rows for one simulated dataset, exposed for suites that need direct access.
pub fn simulate_rows(design: &ReplicationDesign, n_panels: usize, seed: u64) -> Result<EstimationRows, StudyError> {
    Ok(build_rows(&simulate_panels(&design.scenario, n_panels, seed), &design.features)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_statistic() {
        assert!((ks_uniform(&[0.5]) - 0.5).abs() < 1e-15);
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&grid) - 0.005).abs() < 1e-12);
        assert!(ks_uniform(&vec![0.01; 50]) > 0.9);
    }

    #[test]
    fn pitman_morgan_sign() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let z: Vec<(f64, f64)> = (0..500)
            .map(|_| (rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)))
            .collect();
        let x: Vec<f64> = z.iter().map(|(a, b)| 2.0 * a + b).collect();
        let y: Vec<f64> = z.iter().map(|(a, _)| *a).collect();
        assert!(pitman_morgan(&x, &y) > 5.0);
        assert!(pitman_morgan(&y, &x) < -5.0);
    }
}
