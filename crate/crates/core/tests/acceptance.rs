//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use lagfx::efficient::{fit_efficient, main_baseline, BaselineSource, EfficientOptions, VarianceModel};
use lagfx::estimator::{clip_probability, estimate, render_table, wald, EstimateOptions, ReportRow, DEFAULT_CLIP};
use lagfx::glm;
use lagfx::panel::{build_rows, FeatureSpec, TermSpec};
use lagfx::pipeline::{analyze_panels, AnalysisConfig};
use lagfx::sim::{
    check_identification, oracle_lag_effect, simulate_panels, CellFeature, Conditioning, Scenario, ScenarioSpec,
};
use lagfx::study::{
    consistency_suite, double_robustness_suite, efficiency_suite, population_target, run_replications, summarize,
    ReplicationDesign, RobustnessModels, TargetSettings, KS_CRITICAL_1PCT,
};
use lagfx::par;
use nalgebra::DMatrix;

/// Sub-checks of one criterion: `(passed, description)`.
type Checks = Vec<(bool, String)>;

fn scenario(text: &str) -> Scenario {
    Scenario::new(ScenarioSpec::from_toml(text).expect("scenario parses")).expect("scenario is valid")
}

fn current(c: &str) -> TermSpec {
    TermSpec::Current { column: c.into() }
}

fn future(c: &str) -> TermSpec {
    TermSpec::Future { column: c.into() }
}

fn inv_logit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// Fully discrete scenario; continuation depends on the decision and outcome.
const DISCRETE: &str = r#"
k_max = 3
positivity_floor = 0.05

[[context]]
name = "x"
family = "bernoulli"
intercept = -0.3
terms = [{ coef = 0.8, of = ["a@1"] }]

[decision]
intercept = -0.2
terms = [{ coef = 1.0, of = ["x:x"] }, { coef = 0.6, of = ["a@1"] }]

[outcome]
intercept = 1.0
terms = [
  { coef = 0.5, of = ["x:x"] },
  { coef = 1.5, of = ["a@1"] },
  { coef = 0.7, of = ["x:x@1", "a@1"] },
  { coef = 0.3, of = ["y@1"] },
]
noise = "rademacher"
scale = { intercept = 0.5, terms = [{ coef = 0.5, of = ["x:x"] }] }

[continuation]
intercept = 1.0
terms = [{ coef = 0.8, of = ["a"] }, { coef = -0.5, of = ["y"] }]
"#;

/// One job of the discrete scenario written out by hand.
#[derive(Clone, Copy)]
struct DJob {
    x: f64,
    a: f64,
    y: f64,
}

/// Exact `E[Y_target | job target exists]` with `A_k` forced to `arm`.
fn enumerate_arm(k: usize, target: usize, arm: f64) -> f64 {
    fn walk(hist: &mut Vec<DJob>, prob: f64, k: usize, target: usize, arm: f64, acc: &mut (f64, f64)) {
        let j = hist.len() + 1;
        let prev = hist.last().copied().unwrap_or(DJob { x: 0.0, a: 0.0, y: 0.0 });
        let px = inv_logit(-0.3 + 0.8 * prev.a);
        for (x, wx) in [(1.0, px), (0.0, 1.0 - px)] {
            let pa = inv_logit(-0.2 + x + 0.6 * prev.a).clamp(0.05, 0.95);
            let arms: Vec<(f64, f64)> = if j == k { vec![(arm, 1.0)] } else { vec![(1.0, pa), (0.0, 1.0 - pa)] };
            for (a, wa) in arms {
                let mean = 1.0 + 0.5 * x + 1.5 * prev.a + 0.7 * prev.x * prev.a + 0.3 * prev.y;
                let scale = (0.5 + 0.5 * x).max(0.0);
                for eps in [-1.0, 1.0] {
                    let y = mean + scale * eps;
                    let p = prob * wx * wa * 0.5;
                    if j == target {
                        acc.0 += p * y;
                        acc.1 += p;
                        continue;
                    }
                    if j == 3 {
                        continue;
                    }
                    let pc = inv_logit(1.0 + 0.8 * a - 0.5 * y);
                    hist.push(DJob { x, a, y });
                    walk(hist, p * pc, k, target, arm, acc);
                    hist.pop();
                }
            }
        }
    }
    let mut acc = (0.0, 0.0);
    walk(&mut Vec::new(), 1.0, k, target, arm, &mut acc);
    acc.0 / acc.1
}

fn criterion_1() -> Checks {
    let sc = scenario(DISCRETE);
    let start = Instant::now();
    let mut checks = Vec::new();
    par::with_threads(1, || {
        for (k, lag) in [(1, 1), (1, 2), (2, 1)] {
            let exact = enumerate_arm(k, k + lag, 1.0) - enumerate_arm(k, k + lag, 0.0);
            let o = oracle_lag_effect(&sc, k, lag, &Conditioning::unconditional(), 100_000, 1000 + k as u64).unwrap();
            let dev = (o.value - exact).abs();
            checks.push((
                dev <= 3.0 * o.mc_se,
                format!("k={k} lag={lag}: oracle {:.5} exact {exact:.5} |diff|/se {:.2}", o.value, dev / o.mc_se),
            ));
        }
    });
    let secs = start.elapsed().as_secs_f64();
    checks.push((secs < 30.0, format!("3 x 1e5 replicates single-threaded in {secs:.1}s")));
    checks
}

const CONFOUNDED: &str = r#"
k_max = 4
positivity_floor = 0.02

[[context]]
name = "x"
family = "bernoulli"
intercept = 0.0

[[context]]
name = "u"
family = "bernoulli"
intercept = 0.0

[decision]
intercept = -1.0
terms = [{ coef = 0.8, of = ["x:x"] }, { coef = 2.0, of = ["x:u"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.5, of = ["x:x"] }, { coef = 1.0, of = ["a@1"] }, { coef = 2.0, of = ["x:u@1"] }]

[continuation]
link = "identity"
intercept = 0.9
"#;

fn criterion_2() -> Checks {
    let mut checks = Vec::new();
    let sc = scenario(DISCRETE);
    let cases = [
        (1, vec![current("x")], 0, vec![CellFeature::exact("x")]),
        (2, vec![current("x")], 1, vec![CellFeature::exact("x"), CellFeature::exact("a.lag1")]),
    ];
    for (k, terms, n_lag, cells) in cases {
        let cond = Conditioning {
            terms,
            n_lagged_actions: n_lag,
            r_cells: cells,
            s_bin: Vec::new(),
        };
        let r = check_identification(&sc, k, 1, &cond, 100_000, 2000 + k as u64).unwrap();
        checks.push((
            r.z.abs() <= 3.0,
            format!(
                "positivity-respecting k={k}: oracle {:.4} observational {:.4} z {:.2}",
                r.oracle.value, r.observational.value, r.z
            ),
        ));
    }
    let sc = scenario(CONFOUNDED);
    let cond = Conditioning {
        terms: vec![current("x")],
        n_lagged_actions: 0,
        r_cells: vec![CellFeature::exact("x")],
        s_bin: Vec::new(),
    };
    let r = check_identification(&sc, 1, 1, &cond, 100_000, 2100).unwrap();
    checks.push((
        r.z.abs() >= 5.0,
        format!(
            "omitted common cause: oracle {:.4} observational {:.4} z {:.1}",
            r.oracle.value, r.observational.value, r.z
        ),
    ));
    checks
}

fn gaussian_scenario(tau: f64) -> Scenario {
    scenario(&format!(
        r#"
k_max = 10
positivity_floor = 0.01

[[context]]
name = "x"
family = "gaussian"
intercept = 0.0

[decision]
intercept = -0.2
terms = [{{ coef = 0.8, of = ["x:x"] }}, {{ coef = 0.5, of = ["a@1"] }}]

[outcome]
intercept = 1.0
terms = [{{ coef = 0.6, of = ["x:x"] }}, {{ coef = 0.3, of = ["x:x@1"] }}, {{ coef = {tau}, of = ["a@1"] }}]

[continuation]
link = "identity"
intercept = 0.85
"#
    ))
}

fn gaussian_design(tau: f64) -> ReplicationDesign {
    ReplicationDesign {
        scenario: gaussian_scenario(tau),
        features: FeatureSpec::new(1, vec![current("x"), future("x")])
            .with_lagged_actions(1)
            .with_p(&["x", "a.lag1", "a.lag1.pad"]),
        contrast: vec![1.0],
        options: EstimateOptions::default(),
    }
}

const TAU: f64 = 0.5;
const REPS: usize = 500;

fn criteria_3_and_4() -> (Checks, Checks) {
    let design = gaussian_design(TAU);
    let start = Instant::now();
    let report = consistency_suite(&design, &[100, 400, 1600], REPS, 3000, TAU);
    let secs = start.elapsed().as_secs_f64();
    let threads = par::current_threads();
    let mut c3 = Vec::new();
    let mut c4 = Vec::new();
    for s in &report.summaries {
        c3.push((
            s.failures == 0,
            format!("n={}: {} replications, {} failures", s.n_panels, s.replications, s.failures),
        ));
    }
    let mid = &report.summaries[1];
    c3.push((
        mid.bias.abs() <= 3.0 * mid.se_of_mean,
        format!("n=400: |bias| {:.5} vs 3*se_of_mean {:.5}", mid.bias.abs(), 3.0 * mid.se_of_mean),
    ));
    for (w, r) in report.summaries.windows(2).zip(&report.rmse_ratios) {
        c3.push((
            (1.5..=2.5).contains(r),
            format!("rmse n={} -> n={}: {:.4} -> {:.4} ratio {r:.3}", w[0].n_panels, w[1].n_panels, w[0].rmse, w[1].rmse),
        ));
    }
    c3.push((secs < 600.0, format!("grid of 3 x {REPS} replications in {secs:.1}s on {threads} thread(s)")));
    for s in &report.summaries {
        let rel = (s.mean_se / s.sd - 1.0).abs();
        c4.push((rel <= 0.15, format!("n={}: mean SE {:.5} vs replication SD {:.5} ({:+.1}%)", s.n_panels, s.mean_se, s.sd, 100.0 * (s.mean_se / s.sd - 1.0))));
        c4.push((
            (0.92..=0.98).contains(&s.coverage),
            format!("n={}: 95% coverage {:.3}", s.n_panels, s.coverage),
        ));
    }
    let null = summarize(&run_replications(&gaussian_design(0.0), 400, REPS, 3100), 0.0);
    c4.push((
        null.failures == 0 && null.ks_statistic <= null.ks_critical_1pct,
        format!(
            "null n=400: KS {:.4} vs 1% critical {:.4} (rejection rate {:.3})",
            null.ks_statistic, null.ks_critical_1pct, null.rejection_rate
        ),
    ));
    assert!((null.ks_critical_1pct - KS_CRITICAL_1PCT / (REPS as f64).sqrt()).abs() < 1e-12);
    (c3, c4)
}

fn criterion_5() -> Checks {
    let sc = scenario(
        r#"
k_max = 10
positivity_floor = 0.01

[[context]]
name = "x"
family = "gaussian"
intercept = 0.0

[decision]
intercept = -0.8
terms = [{ coef = 0.4, of = ["x:x"] }, { coef = 0.6, of = ["x:x", "x:x"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.5, of = ["x:x"] }, { coef = 0.8, of = ["x:x@1", "x:x@1"] }, { coef = 0.5, of = ["a@1"] }]

[continuation]
link = "identity"
intercept = 0.85
"#,
    );
    let design = ReplicationDesign {
        scenario: sc,
        features: FeatureSpec::new(
            1,
            vec![
                TermSpec::Poly {
                    column: "x".into(),
                    source: Default::default(),
                    degree: 2,
                },
                future("x"),
            ],
        ),
        contrast: vec![1.0],
        options: EstimateOptions::default(),
    };
    let models = RobustnessModels {
        correct_g: vec!["x^1".into(), "x^2".into(), "fut.x".into()],
        wrong_g: vec!["x^1".into(), "fut.x".into()],
        correct_p: vec!["x^1".into(), "x^2".into()],
        wrong_p: vec!["x^1".into()],
    };
    let cells = double_robustness_suite(&design, &models, 400, REPS, 5000, 0.5);
    cells
        .iter()
        .map(|c| {
            let s = &c.summary;
            let line = format!(
                "{}: bias {:+.5} se_of_mean {:.5} ({} failures)",
                c.label, s.bias, s.se_of_mean, s.failures
            );
            match c.pass {
                Some(p) => (p && s.failures == 0, line),
                None => (true, format!("{line} [recorded, no pass bar]")),
            }
        })
        .collect()
}

fn criterion_6() -> Checks {
    let sc = scenario(
        r#"
k_max = 6
positivity_floor = 0.01

[[context]]
name = "x"
family = "bernoulli"
intercept = 0.0

[decision]
intercept = -0.5
terms = [{ coef = 1.5, of = ["x:x"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.5, of = ["x:x"] }, { coef = 0.4, of = ["a@1"] }, { coef = 1.0, of = ["a@1", "x:x@1"] }]

[continuation]
link = "identity"
intercept = 1.0
"#,
    );
    let design = ReplicationDesign {
        scenario: sc,
        features: FeatureSpec::new(1, vec![current("x"), future("x")]).with_s(&["x"]).with_f(&[]),
        contrast: vec![1.0],
        options: EstimateOptions::default(),
    };
    let target = population_target(
        &design,
        &TargetSettings {
            panels: 200_000,
            oracle_replicates: 100_000,
            seed: 6000,
        },
    )
    .unwrap();
    // Closed form: q(x) = logistic(-0.5 + 1.5x), P(x = 1) = 1/2, effect 0.4 + x.
    let v0 = inv_logit(-0.5) * (1.0 - inv_logit(-0.5));
    let v1 = inv_logit(1.0) * (1.0 - inv_logit(1.0));
    let closed = (v0 * 0.4 + v1 * 1.4) / (v0 + v1);
    let summary = summarize(&run_replications(&design, 400, REPS, 6100), target.beta[0]);
    let tol = 3.0 * (summary.se_of_mean.powi(2) + target.se[0].powi(2)).sqrt();
    vec![
        (
            (target.beta[0] - closed).abs() <= 3.0 * target.se[0] + 1e-3,
            format!("simulated target {:.5} (se {:.5}) vs closed form {closed:.5}", target.beta[0], target.se[0]),
        ),
        (
            (summary.mean - target.beta[0]).abs() <= tol && summary.failures == 0,
            format!(
                "mean beta {:.5} vs target {:.5}: |diff| {:.5} <= {tol:.5} (unweighted mean effect 0.9)",
                summary.mean,
                target.beta[0],
                (summary.mean - target.beta[0]).abs()
            ),
        ),
    ]
}

fn efficiency_scenario(high_scale: f64) -> Scenario {
    scenario(&format!(
        r#"
k_max = 10
positivity_floor = 0.01

[[context]]
name = "x"
family = "bernoulli"
intercept = 0.0

[decision]
intercept = -0.3
terms = [{{ coef = 1.0, of = ["x:x"] }}]

[outcome]
intercept = 1.0
terms = [{{ coef = 0.5, of = ["x:x"] }}, {{ coef = 0.8, of = ["a@1"] }}]
scale = {{ intercept = 1.0, terms = [{{ coef = {}, of = ["x:x@1"] }}] }}

[continuation]
link = "identity"
intercept = 0.85
"#,
        high_scale - 1.0
    ))
}

fn efficiency_features() -> FeatureSpec {
    FeatureSpec::new(1, vec![current("x"), future("x")])
        .with_s(&["x", "fut.x"])
        .with_p(&["x", "fut.x"])
        .with_f(&[])
}

fn criterion_7() -> Checks {
    let features = efficiency_features();
    let report = efficiency_suite(&efficiency_scenario(5.0), &features, 400, REPS, 7000).unwrap();
    let mut checks = vec![(
        report.failures == 0 && report.var_efficient < report.var_main && report.pitman_morgan >= 3.0,
        format!(
            "SD ratio 5:1: var main {:.6} efficient {:.6} ratio {:.3} Pitman-Morgan z {:.2}",
            report.var_main, report.var_efficient, report.variance_ratio, report.pitman_morgan
        ),
    )];
    let panels = simulate_panels(&efficiency_scenario(1.0), 600, 7100);
    let rows = build_rows(&panels, &features).unwrap();
    let main = estimate(&rows, &EstimateOptions::default()).unwrap();
    let eff = fit_efficient(
        &rows,
        &EfficientOptions {
            baseline: BaselineSource::Supplied(main_baseline(&rows, &main)),
            variance: VarianceModel::Constant,
            clip: DEFAULT_CLIP,
        },
    )
    .unwrap();
    let diff = eff
        .beta
        .iter()
        .zip(&main.beta)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    checks.push((diff <= 1e-8, format!("homoskedastic, same data: max |beta_eff - beta_main| {diff:.2e}")));
    checks
}

fn criterion_8() -> Checks {
    let mut checks = Vec::new();
    let r_all = ["x", "fut.x", "a.lag1", "a.lag1.pad"];
    let base = FeatureSpec::new(1, vec![current("x"), future("x")]).with_lagged_actions(1);
    let panels = simulate_panels(&gaussian_scenario(TAU), 400, 8000);

    let rows = build_rows(&panels, &base.clone().with_s(&r_all)).unwrap();
    let est = estimate(&rows, &EstimateOptions::default()).unwrap();
    let all_one = rows.rows.iter().all(|r| est.weight(r) == 1.0);
    checks.push((all_one && est.diagnostics.shared_propensity, format!("S = R: all {} weights exactly 1", rows.len())));

    let rows = build_rows(&panels, &base.clone().with_s(&["x"])).unwrap();
    let est = estimate(&rows, &EstimateOptions::default()).unwrap();
    let st = &est.structure;
    let (na, nb) = (st.dim_alpha(), st.dim_beta());
    let mut d = DMatrix::zeros(rows.len(), na + nb);
    let mut w = Vec::new();
    let mut y = Vec::new();
    for (i, row) in rows.rows.iter().enumerate() {
        let q = clip_probability(est.numerator(row), st.clip).0;
        let design = st.design(row, q);
        let f = st.layout.f_basis(&row.s);
        for j in 0..na {
            d[(i, j)] = design[j];
        }
        for j in 0..nb {
            d[(i, na + j)] = (f64::from(row.a) - q) * f[j];
        }
        w.push(est.weight(row));
        y.push(row.y_future);
    }
    let centered = glm::fit_wls(&d, &y, &w).unwrap();
    let diff = centered.coefficients[na..]
        .iter()
        .zip(&est.beta)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    checks.push((diff <= 1e-10, format!("centered (A - q) f effect columns: max |d beta| {diff:.2e}")));

    let bound = 1e-6 * rows.len() as f64;
    checks.push((
        est.diagnostics.max_abs_score <= bound,
        format!("stacked score max-norm {:.2e} <= {bound:.2e}", est.diagnostics.max_abs_score),
    ));

    let noiseless = scenario(
        r#"
k_max = 10
positivity_floor = 0.01

[[context]]
name = "x"
family = "gaussian"
intercept = 0.0

[decision]
intercept = -0.2
terms = [{ coef = 0.8, of = ["x:x"] }, { coef = 0.5, of = ["a@1"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.6, of = ["x:x"] }, { coef = 0.3, of = ["x:x@1"] }, { coef = 0.7, of = ["a@1"] }, { coef = -0.4, of = ["a@1", "x:x@1"] }]
noise = "none"

[continuation]
link = "identity"
intercept = 0.85
"#,
    );
    let rows = build_rows(&simulate_panels(&noiseless, 300, 8100), &base.with_s(&["x"])).unwrap();
    let est = estimate(&rows, &EstimateOptions::default()).unwrap();
    let err = (est.beta[0] - 0.7).abs().max((est.beta[1] + 0.4).abs());
    checks.push((err <= 1e-10, format!("noiseless recovery of beta = (0.7, -0.4): max error {err:.2e}")));
    checks
}

fn criterion_9() -> Checks {
    let sc = scenario(
        r#"
k_max = 12

[[context]]
name = "x"
family = "gaussian"
intercept = 0.0
terms = [{ coef = 0.4, of = ["a@1"] }, { coef = 0.2, of = ["y@1"] }]

[[context]]
name = "b"
family = "bernoulli"
intercept = 0.1
terms = [{ coef = 0.7, of = ["a@1"] }]

[decision]
intercept = -0.2
terms = [{ coef = 0.8, of = ["x:x"] }, { coef = 0.5, of = ["a@1"] }, { coef = -0.6, of = ["x:b"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.6, of = ["x:x"] }, { coef = 0.7, of = ["a@1"] }, { coef = 0.3, of = ["y@1"] }]

[continuation]
intercept = 2.0
terms = [{ coef = 0.5, of = ["a"] }, { coef = -0.3, of = ["y"] }]
"#,
    );
    let pairs = 10_000;
    let mut reached = 0;
    let mut consistency_ok = 0;
    let mut consistency_checked = 0;
    let mut irrelevance_ok = 0;
    for i in 0..pairs {
        let seed = lagfx::sim::derive_seed(9000, i as u64);
        let k_star = 1 + i % 6;
        let Ok(pair) = sc.simulate_world_pair(k_star, seed) else {
            continue;
        };
        reached += 1;
        let natural = sc.simulate_panel(seed);
        consistency_checked += 1;
        if pair.world(pair.natural_a) == &natural {
            consistency_ok += 1;
        }
        let (w1, w0) = (&pair.world_1.jobs, &pair.world_0.jobs);
        let prefix = w1[..k_star - 1] == w0[..k_star - 1];
        let context = w1[k_star - 1].x == w0[k_star - 1].x;
        let natural_a = natural.jobs.get(k_star - 1).map(|j| j.a) == Some(pair.natural_a);
        if prefix && context && natural_a {
            irrelevance_ok += 1;
        }
    }
    vec![
        (
            consistency_ok == consistency_checked && reached > pairs / 2,
            format!("consistency: forced world equals natural trajectory in {consistency_ok}/{consistency_checked} pairs"),
        ),
        (
            irrelevance_ok == reached,
            format!("causal irrelevance: prefix, current context and natural decision agree in {irrelevance_ok}/{reached} pairs"),
        ),
    ]
}

fn criterion_10() -> Checks {
    let rows = vec![
        ReportRow {
            variable: "(intercept)".into(),
            estimate: 0.04,
            ci_low: 0.012,
            ci_high: 0.091,
            p_value: 0.021,
        },
        ReportRow {
            variable: "x".into(),
            estimate: 1.96,
            ci_low: 0.31,
            ci_high: 3.6,
            p_value: 0.012,
        },
    ];
    let golden = "Variable     Estimate (95% CI)  P\n(intercept)  0.04 (0.01, 0.09)  .02\nx            2.0 (0.3, 3.6)     .01\n";
    let table = render_table(&rows);
    let mut checks = vec![(table == golden, format!("golden table rows {:?}", table.lines().skip(1).collect::<Vec<_>>()))];

    let panels = simulate_panels(&gaussian_scenario(TAU), 500, 10_000);
    let config: AnalysisConfig = AnalysisConfig::from_toml(
        r#"
input = "unused.csv"
output_dir = "unused"
lag = 1
terms = [{ kind = "current", column = "x" }, { kind = "future", column = "x" }]
n_lagged_actions = 1
s_variables = ["x"]
propensity_grid = [["x"], ["x", "a.lag1", "a.lag1.pad"]]
"#,
    )
    .unwrap();
    let render = |threads: usize| {
        par::with_threads(threads, || {
            let sim = simulate_panels(&gaussian_scenario(TAU), 500, 10_000);
            assert_eq!(sim, panels);
            let r = analyze_panels(&config, &sim).unwrap();
            let reps = run_replications(&gaussian_design(TAU), 100, 20, 10_100);
            format!("{}{}{}{}", r.tsv(), r.table(), r.diagnostics_json(), serde_json::to_string(&reps).unwrap())
        })
    };
    let one = render(1);
    let many = render(8);
    let again = render(3);
    checks.push((
        one == many && one == again,
        format!("analysis + replication outputs byte-identical at 1, 8 and 3 threads ({} bytes)", one.len()),
    ));
    let est = estimate(
        &build_rows(&panels, &FeatureSpec::new(1, vec![current("x"), future("x")]).with_lagged_actions(1)).unwrap(),
        &EstimateOptions::default(),
    )
    .unwrap();
    let row = wald(&est, &[1.0]).unwrap().row("a.lag effect");
    let line = render_table(&[row]);
    let ok = line.lines().nth(1).is_some_and(|l| l.contains(" (") && l.contains(", ") && l.ends_with("<.01"));
    checks.push((ok, format!("synthetic estimate row {:?}", line.lines().nth(1).unwrap_or(""))));
    checks
}

fn run(name: &str, f: impl FnOnce() -> Checks) -> bool {
    let start = Instant::now();
    let checks = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        vec![(false, format!("panicked: {msg}"))]
    });
    report(name, &checks, start.elapsed().as_secs_f64())
}

fn report(name: &str, checks: &Checks, secs: f64) -> bool {
    let pass = !checks.is_empty() && checks.iter().all(|c| c.0);
    println!("{} {name} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    for (ok, msg) in checks {
        println!("    [{}] {msg}", if *ok { "ok" } else { "x" });
    }
    pass
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| args.is_empty() || args.iter().any(|a| n.contains(a.as_str()));
    let mut results = Vec::new();
    let named = [
        ("criterion 1: oracle matches exact enumeration", criterion_1 as fn() -> Checks),
        ("criterion 2: identification and confounding detection", criterion_2),
        ("criterion 5: double robustness", criterion_5),
        ("criterion 6: overlap-weighted limit", criterion_6),
        ("criterion 7: efficient score", criterion_7),
        ("criterion 8: exact algebraic checks", criterion_8),
        ("criterion 9: potential-outcome structure", criterion_9),
        ("criterion 10: report fidelity and determinism", criterion_10),
    ];
    for (name, f) in &named[..2] {
        if wanted(name) {
            results.push(run(name, f));
        }
    }
    let n3 = "criterion 3: consistency and rate";
    let n4 = "criterion 4: sandwich validity";
    if wanted(n3) || wanted(n4) {
        let start = Instant::now();
        match catch_unwind(criteria_3_and_4) {
            Ok((c3, c4)) => {
                let secs = start.elapsed().as_secs_f64();
                results.push(report(n3, &c3, secs));
                results.push(report(n4, &c4, secs));
            }
            Err(_) => {
                results.push(report(n3, &vec![(false, "panicked".into())], 0.0));
                results.push(report(n4, &vec![(false, "panicked".into())], 0.0));
            }
        }
    }
    for (name, f) in &named[2..] {
        if wanted(name) {
            results.push(run(name, f));
        }
    }
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
