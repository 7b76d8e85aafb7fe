//! Monte Carlo ground truth for lag effects.
//!
//! Each replicate is a world pair. Arm `a` contributes to cell `c` when its own
//! world has job `k + lag` and its own `R_k(a)` falls in `c` and satisfies the S
//! condition. The marginal effect averages the per-cell contrasts with weights
//! given by the natural world's distribution of cells inside the S condition.
//! Standard errors come from the empirical influence function of that ratio
//! estimator, treating replicates as i.i.d.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::{derive_seed, Scenario};
use super::SimError;
use crate::numeric::CompensatedSum;
use crate::panel::{CompiledFeatures, FeatureSpec, Panel, TermSpec};
use crate::par;

/// How a conditioning feature is discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Each distinct value is its own cell (discrete features).
    Exact,
    /// Cells `(-inf, e0], (e0, e1], ..., (e_last, inf)`.
    Edges(Vec<f64>),
}

impl Binning {
    fn key(&self, v: f64) -> u64 {
        match self {
            Binning::Exact => (v + 0.0).to_bits(),
            Binning::Edges(edges) => edges.iter().take_while(|&&e| v > e).count() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFeature {
    pub name: String,
    pub binning: Binning,
}

impl CellFeature {
    pub fn exact(name: &str) -> Self {
        Self {
            name: name.into(),
            binning: Binning::Exact,
        }
    }

    pub fn edges(name: &str, edges: &[f64]) -> Self {
        Self {
            name: name.into(),
            binning: Binning::Edges(edges.to_vec()),
        }
    }
}

/// A predicate on one `S_k` feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SCondition {
    Equals { name: String, value: f64 },
    /// `low < v <= high`.
    Interval { name: String, low: f64, high: f64 },
}

impl SCondition {
    fn name(&self) -> &str {
        match self {
            SCondition::Equals { name, .. } | SCondition::Interval { name, .. } => name,
        }
    }

    fn holds(&self, v: f64) -> bool {
        match *self {
            SCondition::Equals { value, .. } => v == value,
            SCondition::Interval { low, high, .. } => v > low && v <= high,
        }
    }
}

/// Features available for conditioning, the cells over `R_k`, and the S bin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Conditioning {
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub n_lagged_actions: usize,
    /// Discretization of `R_k`; empty means a single cell.
    #[serde(default)]
    pub r_cells: Vec<CellFeature>,
    /// Conjunction of conditions defining the S bin; empty means unconditional.
    #[serde(default)]
    pub s_bin: Vec<SCondition>,
}

impl Conditioning {
    pub fn unconditional() -> Self {
        Self::default()
    }

    fn compile(&self, scenario: &Scenario, lag: usize) -> Result<CompiledConditioning, SimError> {
        let features = FeatureSpec::new(lag, self.terms.clone())
            .with_lagged_actions(self.n_lagged_actions)
            .compile(&scenario.column_names())
            .map_err(|e| SimError::Conditioning(e.to_string()))?;
        let mut names: Vec<String> = self.r_cells.iter().map(|c| c.name.clone()).collect();
        names.extend(self.s_bin.iter().map(|s| s.name().to_string()));
        for n in &names {
            if !features.layout().r_names.contains(n) {
                return Err(SimError::Conditioning(format!("unknown conditioning feature `{n}`")));
            }
        }
        Ok(CompiledConditioning {
            features,
            names,
            cells: self.r_cells.clone(),
            s_bin: self.s_bin.clone(),
        })
    }
}

struct CompiledConditioning {
    features: CompiledFeatures,
    names: Vec<String>,
    cells: Vec<CellFeature>,
    s_bin: Vec<SCondition>,
}

type CellKey = Vec<u64>;

impl CompiledConditioning {
    /// Cell of job `k` when the row exists and the S condition holds.
    fn locate(&self, panel: &Panel, k: usize) -> Option<CellKey> {
        let values = self
            .features
            .evaluate_named(panel, k, &self.names)
            .expect("names validated at compile time")?;
        let (cell_values, s_values) = values.split_at(self.cells.len());
        if !self.s_bin.iter().zip(s_values).all(|(c, &v)| c.holds(v)) {
            return None;
        }
        Some(self.cells.iter().zip(cell_values).map(|(c, &v)| c.binning.key(v)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub mc_se: f64,
    /// Replicates whose natural world lands in the S bin with job `k + lag` present.
    pub n_effective: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub oracle: OracleEstimate,
    /// Marginalized contrast of observed arms on natural panels.
    pub observational: OracleEstimate,
    /// `observational − oracle`.
    pub difference: f64,
    /// Joint Monte Carlo standard error of the difference.
    pub se: f64,
    pub z: f64,
}

/// What one world pair contributes.
struct Replicate {
    natural_a: u8,
    /// `(cell, Y_{k+lag})` in the natural world.
    natural: Option<(CellKey, f64)>,
    /// Per forced arm `[a = 0, a = 1]`.
    arms: [Option<(CellKey, f64)>; 2],
}

fn simulate_replicates(
    scenario: &Scenario,
    k: usize,
    lag: usize,
    cond: &CompiledConditioning,
    replicates: usize,
    seed: u64,
) -> Result<Vec<Replicate>, SimError> {
    if replicates == 0 {
        return Err(SimError::InvalidSpec("at least one replicate is required".into()));
    }
    if k == 0 || lag == 0 {
        return Err(SimError::InvalidSpec("k and lag must be at least 1".into()));
    }
    let out = par::map_indexed(replicates, |i| {
        let pair = match scenario.simulate_world_pair(k, derive_seed(seed, i as u64)) {
            Ok(p) => p,
            Err(_) => {
                return Replicate {
                    natural_a: 0,
                    natural: None,
                    arms: [None, None],
                }
            }
        };
        let observe = |p: &Panel| cond.locate(p, k).map(|c| (c, p.jobs[k + lag - 1].y));
        Replicate {
            natural_a: pair.natural_a,
            natural: observe(pair.natural()),
            arms: [observe(&pair.world_0), observe(&pair.world_1)],
        }
    });
    Ok(out)
}

/// Indicator and outcome of replicate `i` for one arm mean.
type ArmView<'a> = &'a dyn Fn(&Replicate) -> Option<(&CellKey, f64)>;

/// Weighted contrast `Σ_c w_c (m1_c − m0_c)` with its per-replicate influence values.
fn contrast(reps: &[Replicate], arm1: ArmView, arm0: ArmView, what: &str) -> Result<(f64, Vec<f64>, usize), SimError> {
    let n = reps.len() as f64;
    let mut weight: BTreeMap<&CellKey, usize> = BTreeMap::new();
    for r in reps {
        if let Some((c, _)) = &r.natural {
            *weight.entry(c).or_default() += 1;
        }
    }
    let total: usize = weight.values().sum();
    if total == 0 {
        return Err(SimError::EmptyConditioningCell {
            cell: "S bin".into(),
            arm: "natural".into(),
        });
    }
    // Per arm, per cell: (count, Σ y).
    let mut stats: [BTreeMap<&CellKey, (usize, CompensatedSum)>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for r in reps {
        for (slot, view) in [arm0, arm1].into_iter().enumerate() {
            if let Some((c, y)) = view(r) {
                let e = stats[slot].entry(c).or_insert((0, CompensatedSum::new()));
                e.0 += 1;
                e.1.add(y);
            }
        }
    }
    let mut cells = Vec::with_capacity(weight.len());
    let mut value = CompensatedSum::new();
    for (&c, &count) in &weight {
        let mut means = [0.0; 2];
        for slot in 0..2 {
            match stats[slot].get(c) {
                Some((m, s)) if *m > 0 => means[slot] = s.value() / *m as f64,
                _ => {
                    return Err(SimError::EmptyConditioningCell {
                        cell: format!("{c:?}"),
                        arm: format!("{what} a={slot}"),
                    })
                }
            }
        }
        let w = count as f64 / total as f64;
        let zeta = means[1] - means[0];
        value.add(w * zeta);
        let p_arm = [stats[0][c].0 as f64 / n, stats[1][c].0 as f64 / n];
        cells.push((c, w, zeta, means, p_arm));
    }
    let value = value.value();
    let p_j = total as f64 / n;
    let influence = reps
        .iter()
        .map(|r| {
            let j_cell = r.natural.as_ref().map(|(c, _)| c);
            let j = f64::from(u8::from(j_cell.is_some()));
            let mut psi = CompensatedSum::new();
            for (c, w, zeta, means, p_arm) in &cells {
                let j_c = f64::from(u8::from(j_cell == Some(*c)));
                psi.add(zeta * (j_c - w * j) / p_j);
                for (slot, view) in [arm0, arm1].into_iter().enumerate() {
                    if let Some((rc, y)) = view(r) {
                        if rc == *c {
                            let sign = if slot == 1 { 1.0 } else { -1.0 };
                            psi.add(sign * w * (y - means[slot]) / p_arm[slot]);
                        }
                    }
                }
            }
            psi.value()
        })
        .collect();
    Ok((value, influence, total))
}

fn standard_error(influence: &[f64]) -> f64 {
    let ss = crate::numeric::sum(influence.iter().map(|v| v * v));
    ss.sqrt() / influence.len() as f64
}

fn forced(slot: usize) -> impl Fn(&Replicate) -> Option<(&CellKey, f64)> {
    move |r: &Replicate| r.arms[slot].as_ref().map(|(c, y)| (c, *y))
}

fn observed(arm: u8) -> impl Fn(&Replicate) -> Option<(&CellKey, f64)> {
    move |r: &Replicate| {
        if r.natural_a == arm {
            r.natural.as_ref().map(|(c, y)| (c, *y))
        } else {
            None
        }
    }
}

/// Marginalized lag effect of job `k` on job `k + lag` by simulation.
pub fn oracle_lag_effect(
    scenario: &Scenario,
    k: usize,
    lag: usize,
    conditioning: &Conditioning,
    replicates: usize,
    seed: u64,
) -> Result<OracleEstimate, SimError> {
    let cond = conditioning.compile(scenario, lag)?;
    let reps = simulate_replicates(scenario, k, lag, &cond, replicates, seed)?;
    let (value, psi, n_eff) = contrast(&reps, &forced(1), &forced(0), "forced")?;
    Ok(OracleEstimate {
        value,
        mc_se: standard_error(&psi),
        n_effective: n_eff,
    })
}

/// Compares the oracle with the observational contrast on the same replicates.
pub fn check_identification(
    scenario: &Scenario,
    k: usize,
    lag: usize,
    conditioning: &Conditioning,
    replicates: usize,
    seed: u64,
) -> Result<IdentificationReport, SimError> {
    let cond = conditioning.compile(scenario, lag)?;
    let reps = simulate_replicates(scenario, k, lag, &cond, replicates, seed)?;
    let (oracle, psi_o, n_eff) = contrast(&reps, &forced(1), &forced(0), "forced")?;
    let (obs, psi_b, _) = contrast(&reps, &observed(1), &observed(0), "observed")?;
    let diff_psi: Vec<f64> = psi_b.iter().zip(&psi_o).map(|(b, o)| b - o).collect();
    let se = standard_error(&diff_psi);
    let difference = obs - oracle;
    Ok(IdentificationReport {
        oracle: OracleEstimate {
            value: oracle,
            mc_se: standard_error(&psi_o),
            n_effective: n_eff,
        },
        observational: OracleEstimate {
            value: obs,
            mc_se: standard_error(&psi_b),
            n_effective: n_eff,
        },
        difference,
        se,
        z: if se > 0.0 { difference / se } else { 0.0 },
    })
}
