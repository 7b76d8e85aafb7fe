//! Config-driven analysis and simulation-study runs that write report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimator::{estimate, render_table, wald, write_tsv, Diagnostics, EstimateOptions, ReportRow, DEFAULT_CLIP};
use crate::glm;
use crate::panel::{build_rows, parse_panels, FeatureSpec, PanelSet, TermSpec};
use crate::sim::{check_identification, oracle_lag_effect, CellFeature, Conditioning, IdentificationReport, SCondition, Scenario, ScenarioSpec};
use crate::study::{
    consistency_suite, double_robustness_suite, efficiency_suite, population_target, ConsistencyReport, EfficiencyReport,
    PopulationTarget, ReplicationDesign, RobustnessCell, RobustnessModels, TargetSettings,
};
use crate::Error;

fn default_min_panel_size() -> usize {
    3
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

/// Batch analysis of an observational panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Panel CSV; relative paths resolve against the config file.
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub lag: usize,
    /// Feature columns to read; empty means every non-reserved column.
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub n_lagged_actions: usize,
    #[serde(default)]
    pub g_features: Option<Vec<String>>,
    #[serde(default)]
    pub p_features: Option<Vec<String>>,
    /// One run per entry plus the empty set.
    #[serde(default)]
    pub s_variables: Vec<String>,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_min_panel_size")]
    pub min_panel_size: usize,
    /// Candidate denominator designs scored by QICu in the diagnostics.
    #[serde(default)]
    pub propensity_grid: Vec<Vec<String>>,
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Feature spec of the run with `S = {s}` (or empty).
    pub fn feature_spec(&self, s: Option<&str>) -> FeatureSpec {
        FeatureSpec {
            lag: self.lag,
            terms: self.terms.clone(),
            n_lagged_actions: self.n_lagged_actions,
            s_features: s.map(|v| vec![v.to_string()]).unwrap_or_default(),
            f_features: None,
            g_features: self.g_features.clone(),
            p_features: self.p_features.clone(),
        }
    }

    fn validate(&self, columns: &[String]) -> Result<(), Error> {
        if self.lag == 0 {
            return Err(Error::Config("lag must be at least 1".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Config(format!("clip must lie in (0, 0.5), got {}", self.clip)));
        }
        let compiled = self.feature_spec(None).compile(columns)?;
        let names = &compiled.layout().r_names;
        for s in &self.s_variables {
            if !names.contains(s) {
                return Err(Error::Config(format!(
                    "s_variable `{s}` is not among the declared features {names:?}"
                )));
            }
        }
        for (i, cand) in self.propensity_grid.iter().enumerate() {
            if let Some(bad) = cand.iter().find(|c| !names.contains(c)) {
                return Err(Error::Config(format!("propensity_grid[{i}]: unknown feature `{bad}`")));
            }
        }
        for s in &self.s_variables {
            self.feature_spec(Some(s)).compile(columns)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRun {
    pub s_variable: Option<String>,
    pub row: ReportRow,
    pub beta_names: Vec<String>,
    pub beta: Vec<f64>,
    pub contrast: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QicuEntry {
    pub p_features: Vec<String>,
    pub qicu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub panels_read: usize,
    pub panels_used: usize,
    pub runs: Vec<AnalysisRun>,
    pub propensity_qicu: Vec<QicuEntry>,
}

impl AnalysisReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.runs.iter().map(|r| r.row.clone()).collect()
    }

    pub fn tsv(&self) -> String {
        write_tsv(&self.rows())
    }

    pub fn table(&self) -> String {
        render_table(&self.rows())
    }

    pub fn diagnostics_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Label of the empty `S` choice in reports.
pub const EMPTY_S_LABEL: &str = "(none)";

/// Runs every `S` choice on an in-memory panel set.
pub fn analyze_panels(config: &AnalysisConfig, panels: &PanelSet) -> Result<AnalysisReport, Error> {
    config.validate(panels.column_names())?;
    let used = panels.filter_min_size(config.min_panel_size);
    let options = EstimateOptions {
        clip: config.clip,
        covariance: true,
    };
    let choices: Vec<Option<&str>> = std::iter::once(None)
        .chain(config.s_variables.iter().map(|s| Some(s.as_str())))
        .collect();
    let mut runs = Vec::with_capacity(choices.len());
    for s in choices {
        let rows = build_rows(&used, &config.feature_spec(s))?;
        let est = estimate(&rows, &options)?;
        // Main effect for S = ∅; interaction f(1)'β − f(0)'β = β_s otherwise.
        let contrast = if s.is_none() { vec![1.0] } else { vec![0.0, 1.0] };
        let w = wald(&est, &contrast)?;
        runs.push(AnalysisRun {
            s_variable: s.map(str::to_string),
            row: w.row(s.unwrap_or(EMPTY_S_LABEL)),
            beta_names: est.names.beta.clone(),
            beta: est.beta.clone(),
            contrast,
            diagnostics: est.diagnostics.clone(),
        });
    }
    let mut propensity_qicu = Vec::new();
    if !config.propensity_grid.is_empty() {
        let base = build_rows(&used, &config.feature_spec(None))?;
        let a: Vec<f64> = base.rows.iter().map(|r| f64::from(r.a)).collect();
        for cand in &config.propensity_grid {
            let idx: Vec<usize> = cand
                .iter()
                .map(|c| base.layout.r_names.iter().position(|n| n == c).expect("validated"))
                .collect();
            let mut x = nalgebra::DMatrix::zeros(base.len(), 1 + idx.len());
            for (i, r) in base.rows.iter().enumerate() {
                x[(i, 0)] = 1.0;
                for (j, &k) in idx.iter().enumerate() {
                    x[(i, 1 + j)] = r.r[k];
                }
            }
            let fit = glm::fit_logistic(&x, &a).map_err(|source| crate::estimator::EstimateError::Glm {
                stage: "propensity grid",
                source,
            })?;
            propensity_qicu.push(QicuEntry {
                p_features: cand.clone(),
                qicu: glm::qicu(&fit, &x, &a),
            });
        }
    }
    Ok(AnalysisReport {
        config: config.clone(),
        panels_read: panels.len(),
        panels_used: used.len(),
        runs,
        propensity_qicu,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn config_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

/// Reads the config at `path`, analyzes its CSV and writes
/// `report.tsv`, `report.txt` and `diagnostics.json` into `output_dir`.
pub fn run_analysis(path: &Path) -> Result<Outputs, Error> {
    let base = path.parent().unwrap_or(Path::new("."));
    let config = AnalysisConfig::from_toml(&read(path)?).map_err(|e| config_error(path, e))?;
    let input = resolve(base, &config.input);
    let file = fs::File::open(&input).map_err(|source| Error::Io {
        path: input.clone(),
        source,
    })?;
    let panels = parse_panels(std::io::BufReader::new(file), &config.columns).map_err(|e| Error::Data {
        path: input.clone(),
        source: e,
    })?;
    config.validate(panels.column_names()).map_err(|e| config_error(path, e))?;
    let report = analyze_panels(&config, &panels)?;
    let out = resolve(base, &config.output_dir);
    create_dir(&out)?;
    let files = vec![out.join("report.tsv"), out.join("report.txt"), out.join("diagnostics.json")];
    write(&files[0], &report.tsv())?;
    write(&files[1], &report.table())?;
    write(&files[2], &report.diagnostics_json())?;
    Ok(Outputs { files })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Consistency,
    Coverage,
    DoubleRobustness,
    Efficiency,
    Identification,
}

/// Ground truth for the studied contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// A known value.
    Value { value: f64 },
    /// Unconditional oracle at job `k`.
    Oracle { k: usize, replicates: usize },
    /// Overlap-weighted limit of the working model (discrete `S`).
    Population { panels: usize, oracle_replicates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub correct_g: Vec<String>,
    pub wrong_g: Vec<String>,
    pub correct_p: Vec<String>,
    pub wrong_p: Vec<String>,
    #[serde(default)]
    pub n_panels: Option<usize>,
}

impl RobustnessConfig {
    pub fn models(&self) -> RobustnessModels {
        RobustnessModels {
            correct_g: self.correct_g.clone(),
            wrong_g: self.wrong_g.clone(),
            correct_p: self.correct_p.clone(),
            wrong_p: self.wrong_p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyConfig {
    /// Must declare `S = R`.
    pub features: FeatureSpec,
    #[serde(default)]
    pub n_panels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    pub k: usize,
    pub replicates: usize,
    #[serde(default)]
    pub r_cells: Vec<CellFeature>,
    #[serde(default)]
    pub s_bin: Vec<SCondition>,
}

/// Simulation study driven by a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: PathBuf,
    pub output_dir: PathBuf,
    pub n_panels: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub features: FeatureSpec,
    /// Contrast over `β`; defaults to the first component.
    #[serde(default)]
    pub contrast: Option<Vec<f64>>,
    #[serde(default = "default_clip")]
    pub clip: f64,
    pub truth: TruthSpec,
    #[serde(default)]
    pub double_robustness: Option<RobustnessConfig>,
    #[serde(default)]
    pub efficiency: Option<EfficiencyConfig>,
    #[serde(default)]
    pub identification: Option<IdentificationConfig>,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self, scenario: &Scenario) -> Result<(), Error> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n_panels.is_empty() || self.n_panels.contains(&0) {
            return Err(Error::Config("n_panels must be a non-empty list of positive counts".into()));
        }
        let compiled = self.features.compile(&scenario.column_names())?;
        let nb = 1 + compiled.layout().f_idx.len();
        if let Some(c) = &self.contrast {
            if c.len() != nb {
                return Err(Error::Config(format!("contrast has {} entries, beta has {nb}", c.len())));
            }
        }
        let need = |suite: Suite, present: bool, name: &str| {
            if self.suites.contains(&suite) && !present {
                Err(Error::Config(format!("suite `{name}` requires a [{name}] section")))
            } else {
                Ok(())
            }
        };
        need(Suite::DoubleRobustness, self.double_robustness.is_some(), "double_robustness")?;
        need(Suite::Efficiency, self.efficiency.is_some(), "efficiency")?;
        need(Suite::Identification, self.identification.is_some(), "identification")?;
        if let Some(e) = &self.efficiency {
            let l = e.features.compile(&scenario.column_names())?;
            if !l.layout().s_equals_p() {
                return Err(Error::Config("efficiency.features must declare S = R (s_features equal to p_features)".into()));
            }
        }
        Ok(())
    }

    fn contrast(&self, scenario: &Scenario) -> Result<Vec<f64>, Error> {
        if let Some(c) = &self.contrast {
            return Ok(c.clone());
        }
        let compiled = self.features.compile(&scenario.column_names())?;
        let mut c = vec![0.0; 1 + compiled.layout().f_idx.len()];
        c[0] = 1.0;
        Ok(c)
    }

    fn middle_n(&self) -> usize {
        self.n_panels[self.n_panels.len() / 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub truth: f64,
    pub truth_se: f64,
    pub population_target: Option<PopulationTarget>,
    pub consistency: Option<ConsistencyReport>,
    pub double_robustness: Option<Vec<RobustnessCell>>,
    pub efficiency: Option<EfficiencyReport>,
    pub identification: Option<IdentificationReport>,
}

fn tsv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

impl StudyReport {
    pub fn replications_tsv(&self) -> Option<String> {
        let c = self.consistency.as_ref()?;
        let rows: Vec<Vec<String>> = c
            .summaries
            .iter()
            .enumerate()
            .map(|(i, s)| {
                vec![
                    s.n_panels.to_string(),
                    s.replications.to_string(),
                    s.failures.to_string(),
                    format!("{:?}", s.truth),
                    format!("{:?}", s.mean),
                    format!("{:?}", s.bias),
                    format!("{:?}", s.sd),
                    format!("{:?}", s.se_of_mean),
                    format!("{:?}", s.rmse),
                    c.rmse_ratios.get(i).map_or(String::new(), |r| format!("{:?}", r)),
                    format!("{:?}", s.mean_se),
                    format!("{:?}", s.se_ratio),
                    format!("{:?}", s.coverage),
                    format!("{:?}", s.rejection_rate),
                    format!("{:?}", s.ks_statistic),
                    format!("{:?}", s.ks_critical_1pct),
                ]
            })
            .collect();
        Some(tsv_table(
            &[
                "n_panels",
                "replications",
                "failures",
                "truth",
                "mean",
                "bias",
                "sd",
                "se_of_mean",
                "rmse",
                "rmse_ratio_next",
                "mean_se",
                "se_ratio",
                "coverage",
                "rejection_rate",
                "ks_statistic",
                "ks_critical_1pct",
            ],
            &rows,
        ))
    }

    pub fn double_robustness_tsv(&self) -> Option<String> {
        let cells = self.double_robustness.as_ref()?;
        let rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| {
                vec![
                    c.label.clone(),
                    c.outcome_model_correct.to_string(),
                    c.propensity_model_correct.to_string(),
                    format!("{:?}", c.summary.mean),
                    format!("{:?}", c.summary.bias),
                    format!("{:?}", c.summary.se_of_mean),
                    format!("{:?}", c.summary.rejection_rate),
                    c.pass.map_or("n/a".to_string(), |p| if p { "pass" } else { "fail" }.to_string()),
                ]
            })
            .collect();
        Some(tsv_table(
            &["cell", "outcome_correct", "propensity_correct", "mean", "bias", "se_of_mean", "rejection_rate", "unbiased"],
            &rows,
        ))
    }

    pub fn efficiency_tsv(&self) -> Option<String> {
        let e = self.efficiency.as_ref()?;
        Some(tsv_table(
            &[
                "n_panels",
                "replications",
                "failures",
                "mean_main",
                "mean_efficient",
                "var_main",
                "var_efficient",
                "variance_ratio",
                "pitman_morgan",
            ],
            &[vec![
                e.n_panels.to_string(),
                e.replications.to_string(),
                e.failures.to_string(),
                format!("{:?}", e.mean_main),
                format!("{:?}", e.mean_efficient),
                format!("{:?}", e.var_main),
                format!("{:?}", e.var_efficient),
                format!("{:?}", e.variance_ratio),
                format!("{:?}", e.pitman_morgan),
            ]],
        ))
    }

    pub fn identification_tsv(&self) -> Option<String> {
        let r = self.identification.as_ref()?;
        Some(tsv_table(
            &["oracle", "oracle_se", "observational", "observational_se", "difference", "se", "z", "n_effective"],
            &[vec![
                format!("{:?}", r.oracle.value),
                format!("{:?}", r.oracle.mc_se),
                format!("{:?}", r.observational.value),
                format!("{:?}", r.observational.mc_se),
                format!("{:?}", r.difference),
                format!("{:?}", r.se),
                format!("{:?}", r.z),
                r.oracle.n_effective.to_string(),
            ]],
        ))
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Short human-readable digest.
    pub fn digest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "truth {} (mc se {})", self.truth, self.truth_se);
        if let Some(c) = &self.consistency {
            for s in &c.summaries {
                let _ = writeln!(
                    out,
                    "n={} bias={:.4} rmse={:.4} se_ratio={:.3} coverage={:.3}",
                    s.n_panels, s.bias, s.rmse, s.se_ratio, s.coverage
                );
            }
        }
        out
    }
}

/// Runs the requested suites on a validated scenario.
pub fn study(config: &StudyConfig, scenario: &Scenario) -> Result<StudyReport, Error> {
    config.validate(scenario)?;
    let design = ReplicationDesign {
        scenario: scenario.clone(),
        features: config.features.clone(),
        contrast: config.contrast(scenario)?,
        options: EstimateOptions {
            clip: config.clip,
            covariance: true,
        },
    };
    let mut population = None;
    let (truth, truth_se) = match &config.truth {
        TruthSpec::Value { value } => (*value, 0.0),
        TruthSpec::Oracle { k, replicates } => {
            let cond = Conditioning {
                terms: config.features.terms.clone(),
                n_lagged_actions: config.features.n_lagged_actions,
                ..Conditioning::default()
            };
            let o = oracle_lag_effect(scenario, *k, config.features.lag, &cond, *replicates, config.seed)?;
            (o.value, o.mc_se)
        }
        TruthSpec::Population {
            panels,
            oracle_replicates,
        } => {
            let t = population_target(
                &design,
                &TargetSettings {
                    panels: *panels,
                    oracle_replicates: *oracle_replicates,
                    seed: config.seed,
                },
            )?;
            let value = crate::numeric::dot(&design.contrast, &t.beta);
            let se = crate::numeric::dot(&design.contrast.iter().map(|c| c.abs()).collect::<Vec<_>>(), &t.se);
            population = Some(t);
            (value, se)
        }
    };
    let wants = |s: Suite| config.suites.contains(&s);
    let consistency = (wants(Suite::Consistency) || wants(Suite::Coverage))
        .then(|| consistency_suite(&design, &config.n_panels, config.replications, config.seed, truth));
    let double_robustness = match (&config.double_robustness, wants(Suite::DoubleRobustness)) {
        (Some(dr), true) => Some(double_robustness_suite(
            &design,
            &dr.models(),
            dr.n_panels.unwrap_or_else(|| config.middle_n()),
            config.replications,
            config.seed,
            truth,
        )),
        _ => None,
    };
    let efficiency = match (&config.efficiency, wants(Suite::Efficiency)) {
        (Some(e), true) => Some(efficiency_suite(
            scenario,
            &e.features,
            e.n_panels.unwrap_or_else(|| config.middle_n()),
            config.replications,
            config.seed,
        )?),
        _ => None,
    };
    let identification = match (&config.identification, wants(Suite::Identification)) {
        (Some(i), true) => {
            let cond = Conditioning {
                terms: config.features.terms.clone(),
                n_lagged_actions: config.features.n_lagged_actions,
                r_cells: i.r_cells.clone(),
                s_bin: i.s_bin.clone(),
            };
            Some(check_identification(scenario, i.k, config.features.lag, &cond, i.replicates, config.seed)?)
        }
        _ => None,
    };
    Ok(StudyReport {
        config: config.clone(),
        truth,
        truth_se,
        population_target: population,
        consistency,
        double_robustness,
        efficiency,
        identification,
    })
}

/// Reads the study config at `path` and writes its tables into `output_dir`.
pub fn run_study(path: &Path) -> Result<Outputs, Error> {
    let base = path.parent().unwrap_or(Path::new("."));
    let config = StudyConfig::from_toml(&read(path)?).map_err(|e| config_error(path, e))?;
    let scenario_path = resolve(base, &config.scenario);
    let spec = ScenarioSpec::from_toml(&read(&scenario_path)?).map_err(|e| Error::Config(format!("{}: {e}", scenario_path.display())))?;
    let scenario = Scenario::new(spec)?;
    let report = study(&config, &scenario).map_err(|e| config_error(path, e))?;
    let out = resolve(base, &config.output_dir);
    create_dir(&out)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, text: Option<String>| -> Result<(), Error> {
        if let Some(t) = text {
            let p = out.join(name);
            write(&p, &t)?;
            files.push(p);
        }
        Ok(())
    };
    emit("replications.tsv", report.replications_tsv())?;
    emit("double_robustness.tsv", report.double_robustness_tsv())?;
    emit("efficiency.tsv", report.efficiency_tsv())?;
    emit("identification.tsv", report.identification_tsv())?;
    emit("study.json", Some(report.summary_json()))?;
    Ok(Outputs { files })
}

/// Simulates `n` panels from the scenario file and writes them as CSV.
pub fn run_simulate(scenario_path: &Path, n: usize, seed: u64, out: &Path) -> Result<Outputs, Error> {
    let spec = ScenarioSpec::from_toml(&read(scenario_path)?).map_err(|e| Error::Config(format!("{}: {e}", scenario_path.display())))?;
    let scenario = Scenario::new(spec)?;
    let panels = crate::sim::simulate_panels(&scenario, n, seed);
    let file = fs::File::create(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    crate::panel::write_panels(&panels, std::io::BufWriter::new(file)).map_err(|e| Error::Data {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(Outputs {
        files: vec![out.to_path_buf()],
    })
}
