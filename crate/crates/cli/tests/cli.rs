use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCENARIO: &str = r#"
k_max = 8

[[context]]
name = "x"
family = "gaussian"
intercept = 0.0

[[context]]
name = "z"
family = "bernoulli"
intercept = 0.0

[decision]
intercept = -0.2
terms = [{ coef = 0.8, of = ["x:x"] }, { coef = 0.5, of = ["a@1"] }]

[outcome]
intercept = 1.0
terms = [{ coef = 0.6, of = ["x:x"] }, { coef = 0.7, of = ["a@1"] }, { coef = 0.4, of = ["a@1", "x:z@1"] }]

[continuation]
link = "identity"
intercept = 0.85
"#;

const ANALYSIS: &str = r#"
input = "panels.csv"
output_dir = "out"
lag = 1
terms = [
  { kind = "current", column = "x" },
  { kind = "current", column = "z" },
  { kind = "future", column = "x" },
]
n_lagged_actions = 1
s_variables = ["z"]
"#;

fn lagfx(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lagfx"))
        .args(args)
        .env("LAGFX_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path) -> PathBuf {
    fs::write(dir.join("scenario.toml"), SCENARIO).unwrap();
    fs::write(dir.join("analysis.toml"), ANALYSIS).unwrap();
    let csv = dir.join("panels.csv");
    let out = lagfx(
        &[
            "simulate",
            "--scenario",
            dir.join("scenario.toml").to_str().unwrap(),
            "--panels",
            "300",
            "--seed",
            "11",
            "--out",
            csv.to_str().unwrap(),
        ],
        "1",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("analysis.toml")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = lagfx(&["analyze", "--config", cfg.to_str().unwrap()], "1");
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = fs::read_to_string(dir.path().join("out/report.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "variable\testimate\tci_low\tci_high\tp_value");
    assert!(lines[1].starts_with("(none)\t"));
    assert!(lines[2].starts_with("z\t"));
    let table = fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(table.starts_with("Variable"));
    let diag = fs::read_to_string(dir.path().join("out/diagnostics.json")).unwrap();
    assert!(diag.contains("\"min_panel_size\": 3"));
    assert!(diag.contains("\"clip_events\""));
}

#[test]
fn reports_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = lagfx(&["--threads", threads, "analyze", "--config", cfg.to_str().unwrap()], threads);
        assert!(out.status.success(), "{}", stderr(&out));
        let files: Vec<Vec<u8>> = ["report.tsv", "report.txt", "diagnostics.json"]
            .iter()
            .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.toml"), SCENARIO).unwrap();
    let scen = dir.path().join("scenario.toml");
    let mut texts = Vec::new();
    for (name, threads) in [("a.csv", "1"), ("b.csv", "3")] {
        let path = dir.path().join(name);
        let out = lagfx(
            &["simulate", "--scenario", scen.to_str().unwrap(), "--panels", "50", "--seed", "5", "--out", path.to_str().unwrap()],
            threads,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        texts.push(fs::read(path).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    fs::write(&cfg, format!("{ANALYSIS}\nbogus = 1\n")).unwrap();
    let out = lagfx(&["analyze", "--config", cfg.to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn s_variable_outside_features_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    fs::write(&cfg, ANALYSIS.replace("s_variables = [\"z\"]", "s_variables = [\"w\"]")).unwrap();
    let out = lagfx(&["analyze", "--config", cfg.to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`w`"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    fs::remove_file(dir.path().join("panels.csv")).unwrap();
    let out = lagfx(&["analyze", "--config", cfg.to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error[io]"));
}

#[test]
fn malformed_csv_is_a_data_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    fs::write(dir.path().join("panels.csv"), "panel_id,job_index,a,y,x,z\n1,1,0,1.0,0.5,1\n1,2,2,1.0,0.5,1\n").unwrap();
    let out = lagfx(&["analyze", "--config", cfg.to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).starts_with("error[data]"));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn study_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.toml"), SCENARIO).unwrap();
    let study = r#"
scenario = "scenario.toml"
output_dir = "study"
n_panels = [60]
replications = 8
seed = 2
suites = ["coverage"]

[features]
lag = 1
terms = [{ kind = "current", column = "x" }, { kind = "current", column = "z" }]
n_lagged_actions = 1

[truth]
kind = "value"
value = 0.9
"#;
    fs::write(dir.path().join("study.toml"), study).unwrap();
    let cfg = dir.path().join("study.toml");
    let a = lagfx(&["study", "--config", cfg.to_str().unwrap()], "1");
    assert!(a.status.success(), "{}", stderr(&a));
    let first = fs::read(dir.path().join("study/replications.tsv")).unwrap();
    let b = lagfx(&["study", "--config", cfg.to_str().unwrap()], "2");
    assert!(b.status.success());
    assert_eq!(first, fs::read(dir.path().join("study/replications.tsv")).unwrap());
}

#[test]
fn study_suite_without_section_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.toml"), SCENARIO).unwrap();
    let study = r#"
scenario = "scenario.toml"
output_dir = "study"
n_panels = [60]
replications = 2
seed = 2
suites = ["efficiency"]

[features]
lag = 1

[truth]
kind = "value"
value = 0.0
"#;
    fs::write(dir.path().join("study.toml"), study).unwrap();
    let out = lagfx(&["study", "--config", dir.path().join("study.toml").to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("[efficiency]"));
}
