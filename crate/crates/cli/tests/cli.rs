use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migrate-rum"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("MIGRATE_RUM_LOG", "off")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn error_kind(o: &Output) -> String {
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is a JSON error");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn simulate_is_deterministic_and_records_seed() {
    let dir = tempfile::tempdir().unwrap();
    let world = fixture("world.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", world.to_str().unwrap(), "--seed", "11"], &a);
    ok(&["simulate", "--config", world.to_str().unwrap(), "--seed", "11"], &b);
    assert_eq!(fs::read(a.join("panel.csv")).unwrap(), fs::read(b.join("panel.csv")).unwrap());
    let report = read_json(&a.join("run_simulate.json"));
    assert_eq!(report["seed"], 11);
    assert_eq!(report["config"]["n_individuals"], 300);
    // 300 people × 5 years × 2 alternatives.
    assert_eq!(report["rows_out"], 3000);
    assert_eq!(read_json(&a.join("generator_params.json"))["world"]["seed"], 11);
}

#[test]
fn build_panel_matches_hand_trace() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["build-panel", "--config", fixture("build.json").to_str().unwrap()], dir.path());
    let report = read_json(&dir.path().join("run_build-panel.json"));
    // Eight respondents survive; their working-age years in 1997–2017 sum to
    // 21·4 + 17 + 20 + 12 + 7.
    assert_eq!(report["rows_in"], 12);
    assert_eq!(report["rows_out"], 140);
    assert_eq!(report["diagnostics"]["persons_in_panel"], 8);
    let drops = report["drop_reasons"].as_object().unwrap();
    for reason in ["never_worked", "multi_move", "householder_restriction", "move_outside_panel"] {
        assert_eq!(drops[reason], 1, "{reason}");
    }
    assert!(report["started_log_c"].as_f64().unwrap() > 1.0);

    let text = fs::read_to_string(dir.path().join("quasi_panel.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (pid, year, migrate) = (col("person_id"), col("year"), col("migrate"));
    let moves: Vec<(String, String)> = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[migrate] == "1")
        .map(|r| (r[pid].to_string(), r[year].to_string()))
        .collect();
    let expected = [("3", "2008"), ("4", "2012"), ("5", "2005"), ("6", "2010"), ("11", "2015")];
    assert_eq!(moves.len(), expected.len());
    for (p, y) in expected {
        assert!(moves.contains(&(p.to_string(), y.to_string())), "person {p} in {y}");
    }
}

#[test]
fn estimate_lpm_writes_coefficient_table() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["build-panel", "--config", fixture("build.json").to_str().unwrap()], dir.path());
    let cfg = write_config(
        dir.path(),
        "lpm.json",
        r#"{"panel": "quasi_panel.csv",
            "spec": {"regressors": ["distance_jobtrend", "age"], "factors": ["time"], "cluster": "destination"},
            "unit_interval": true}"#,
    );
    ok(&["estimate", "lpm", "--config", cfg.to_str().unwrap()], dir.path());
    let table = fs::read_to_string(dir.path().join("lpm_coefficients.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "term,estimate,std_error,z,p_value,ci_lower,ci_upper");
    let terms: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(terms, ["distance_jobtrend", "age"]);
    let report = read_json(&dir.path().join("run_estimate_lpm.json"));
    assert_eq!(report["estimator"], "lpm");
    assert_eq!(report["rows_out"], 140);
    assert!(report["timings_ms"]["fit"].is_number());
}

#[test]
fn report_combines_lpm_and_mlogit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&["build-panel", "--config", fixture("build.json").to_str().unwrap()], out);
    let lpm = write_config(
        out,
        "lpm.json",
        r#"{"panel": "quasi_panel.csv", "spec": {"regressors": ["distance_jobtrend"], "factors": ["time"]}}"#,
    );
    ok(&["estimate", "lpm", "--config", lpm.to_str().unwrap()], out);

    let sim = out.join("sim");
    ok(&["simulate", "--config", fixture("world.json").to_str().unwrap()], &sim);
    let mlogit = write_config(
        &sim,
        "mlogit.json",
        r#"{"panel": "panel.csv", "dv": "moved", "regressors": ["distance_jobtrend"],
            "nesting": {"level2": "destination"},
            "curve": {"variable": "distance_jobtrend", "from": -1.0, "to": 1.0, "step": 0.1}}"#,
    );
    ok(&["estimate", "mlogit", "--config", mlogit.to_str().unwrap()], out);
    ok(&["report"], out);

    let summary = fs::read_to_string(out.join("summary.md")).unwrap();
    assert_eq!(summary.matches("| term | estimate | std. error |").count(), 2);
    assert!(summary.contains("### Intraclass correlation"));
    let curve = fs::read_to_string(out.join("marginal_effects_mlogit_distance_jobtrend.csv")).unwrap();
    // Grid −1.0, −0.9, …, 1.0.
    assert_eq!(curve.lines().count(), 1 + 21);
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "lpm.json",
        r#"{"panel": "nowhere.csv", "spec": {"regressors": ["x"]}}"#,
    );
    let o = run(&["estimate", "lpm", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");

    let o = run(&["estimate", "lpm", "--config", "/definitely/missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["estimate", "probit", "--config", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");
}

#[test]
fn uncovered_city_years_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let stats = fs::read_to_string(fixture("city_stats.csv")).unwrap();
    let trimmed: String = stats.lines().filter(|l| !l.starts_with("3201,2007")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("city_stats.csv"), trimmed).unwrap();
    for f in ["survey.csv", "employment.csv"] {
        fs::copy(fixture(f), dir.path().join(f)).unwrap();
    }
    let cfg = write_config(
        dir.path(),
        "build.json",
        r#"{"survey": "survey.csv", "city_stats": "city_stats.csv", "employment": "employment.csv"}"#,
    );
    let o = run(&["build-panel", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_kind(&o), "data");
    assert!(!dir.path().join("out/quasi_panel.csv").exists());
}

#[test]
fn degenerate_outcome_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("flat.csv"), "destination,migrate,x\n1,0,0.5\n2,0,1.5\n3,0,2.5\n").unwrap();
    let cfg = write_config(dir.path(), "lpm.json", r#"{"panel": "flat.csv", "spec": {"regressors": ["x"]}}"#);
    let o = run(&["estimate", "lpm", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_kind(&o), "numerical");
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn estimate_gmm_reports_diagnostics() {
    use migrate_rum::montecarlo::EndogenousPanelDesign;
    let dir = tempfile::tempdir().unwrap();
    let frame = EndogenousPanelDesign::default().generate(5);
    frame.write_csv(fs::File::create(dir.path().join("panel.csv")).unwrap()).unwrap();
    let cfg = write_config(
        dir.path(),
        "gmm.json",
        r#"{"panel": "panel.csv", "spec": {"dv": "y", "endogenous": ["x"], "collapse": true}}"#,
    );
    ok(&["estimate", "gmm", "--config", cfg.to_str().unwrap()], dir.path());
    let result = read_json(&dir.path().join("gmm_result.json"));
    let x = result["result"]["coefficients"]["x"].as_f64().unwrap();
    assert!((x - 1.0).abs() < 0.5, "x = {x}");
    let report = read_json(&dir.path().join("run_estimate_gmm.json"));
    assert!(report["diagnostics"]["hansen_j"]["stat"].is_number());
    assert!(report["diagnostics"]["ar_tests"]["2"]["p"].is_number());
}
