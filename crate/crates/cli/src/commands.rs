use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use migrate_rum::frame::Frame;
use migrate_rum::gmm::fit_system_gmm;
use migrate_rum::lpm::{fit_lpm, unit_interval_refit, LpmError};
use migrate_rum::mlogit::{fit_mixed_logit, marginal_effect_curve, MarginalEffectPoint, NestedData};
use migrate_rum::panel::{build_quasi_panel, read_survey_csv, CityStats};
use migrate_rum::rumsim::{simulate_panel, WorldConfig};
use migrate_rum::stats::normal_two_sided_p;
use migrate_rum::trending::EmploymentTable;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, BuildPanelConfig, GmmConfig, LpmConfig, MlogitConfig, ReportConfig, SimulateConfig};
use crate::error::{data, numerical, CliError, CliResult};
use crate::output::{OutDir, Timings};

/// The machine-readable record every run leaves in its output directory.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
    pub version: &'static str,
    pub config: Value,
    pub seed: u64,
    pub rows_in: usize,
    pub rows_out: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_reasons: Option<Value>,
    pub started_log_c: Option<f64>,
    pub timings_ms: IndexMap<String, f64>,
    pub diagnostics: Value,
    pub outputs: Vec<String>,
}

impl RunReport {
    fn new(command: &str, config: Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            estimator: None,
            version: env!("CARGO_PKG_VERSION"),
            config,
            seed,
            rows_in: 0,
            rows_out: 0,
            drop_reasons: None,
            started_log_c: None,
            timings_ms: IndexMap::new(),
            diagnostics: Value::Null,
            outputs: Vec::new(),
        }
    }

    fn finish(mut self, out: &OutDir, name: &str, timings: Timings, written: Vec<PathBuf>) -> CliResult<()> {
        self.timings_ms = timings.into_map();
        self.outputs = written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect();
        out.write_json(name, &self)?;
        Ok(())
    }
}

/// Estimation output as stored on disk and read back by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateOutput {
    pub estimator: String,
    pub seed: u64,
    pub config: Value,
    pub result: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_interval: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Curve>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Curve {
    pub variable: String,
    pub points: Vec<MarginalEffectPoint>,
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(data)
}

pub fn simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let (raw_cfg, echo) = config::load::<Value>(config_path)?;
    // A bare world description is accepted as well as the full config.
    let mut cfg: SimulateConfig = match SimulateConfig::deserialize(&raw_cfg) {
        Ok(cfg) => cfg,
        Err(full_err) => match WorldConfig::deserialize(&raw_cfg) {
            Ok(world) => SimulateConfig::deserialize(json!({ "world": world })).map_err(data)?,
            Err(_) => return Err(CliError::Config(format!("config does not match the schema: {full_err}"))),
        },
    };
    if let Some(seed) = seed {
        cfg.world.seed = seed;
    }
    cfg.world.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = OutDir::create(out)?;
    let mut timings = Timings::default();
    let panel = timings
        .time("simulate", || simulate_panel(&cfg.world, cfg.n_individuals, cfg.coefficients, cfg.continuation))
        .map_err(numerical)?;
    let mut written = Vec::new();
    written.push(timings.time("write", || {
        out.write_with("panel.csv", |w| panel.write_csv(w).map_err(data))
    })?);
    written.push(out.write_json("generator_params.json", &panel.generator_params)?);
    let mut report = RunReport::new("simulate", echo, cfg.world.seed);
    report.rows_in = cfg.n_individuals;
    report.rows_out = panel.rows().count();
    report.diagnostics = json!({
        "decisions": panel.decisions.len(),
        "moves": panel.move_count(),
    });
    report.finish(&out, "run_simulate.json", timings, written)
}

pub fn build_panel(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let (cfg, echo) = config::load::<BuildPanelConfig>(config_path)?;
    let survey = config::input_path(config_path, &cfg.survey)?;
    let stats = config::input_path(config_path, &cfg.city_stats)?;
    let employment = config::input_path(config_path, &cfg.employment)?;
    let open = |p: &Path| File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
    let out = OutDir::create(out)?;
    let mut timings = Timings::default();
    let (batch, stats, employment) = timings.time("read", || -> CliResult<_> {
        let batch = read_survey_csv(open(&survey)?).map_err(data)?;
        let stats = CityStats::from_csv(open(&stats)?).map_err(data)?;
        let employment = EmploymentTable::from_csv(open(&employment)?).map_err(data)?;
        Ok((batch, stats, employment))
    })?;
    for e in &batch.errors {
        log::warn!("{e}");
    }
    let mut panel = timings
        .time("assemble", || build_quasi_panel(&batch.rows, &stats, &employment, &cfg.options))
        .map_err(data)?;
    panel.report.input_rows += batch.errors.len();
    panel.report.schema_errors = batch.errors.len();
    let mut written = Vec::new();
    written.push(timings.time("write", || {
        out.write_with("quasi_panel.csv", |w| panel.write_csv(w).map_err(data))
    })?);
    written.push(out.write_json(
        "drop_report.json",
        &json!({ "summary": panel.report, "schema_errors": batch.errors }),
    )?);
    let mut report = RunReport::new("build-panel", echo, seed.unwrap_or(0));
    report.rows_in = panel.report.input_rows;
    report.rows_out = panel.report.output_rows;
    report.drop_reasons = Some(to_value(&panel.report.dropped)?);
    report.started_log_c = panel.started_log.map(|c| c.c());
    report.diagnostics = to_value(&panel.report)?;
    report.finish(&out, "run_build-panel.json", timings, written)
}

fn read_panel(config_path: &Path, panel: &Path, categorical: &Option<Vec<String>>) -> CliResult<Frame> {
    let path = config::input_path(config_path, panel)?;
    let file = File::open(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cats = config::categorical(categorical);
    let names: Vec<&str> = cats.iter().map(String::as_str).collect();
    Frame::from_csv(file, &names).map_err(data)
}

/// `term, estimate, std_error, z, p_value, ci_lower, ci_upper`.
pub const COEFFICIENT_COLUMNS: [&str; 7] = ["term", "estimate", "std_error", "z", "p_value", "ci_lower", "ci_upper"];

fn coefficient_table(coefs: &IndexMap<String, f64>, ses: &IndexMap<String, f64>) -> String {
    let z95 = 1.959_963_984_540_054;
    let mut s = COEFFICIENT_COLUMNS.join(",");
    s.push('\n');
    for (name, &b) in coefs {
        let se = ses.get(name).copied().unwrap_or(f64::NAN);
        let z = b / se;
        let _ = writeln!(
            s,
            "{name},{b},{se},{z},{},{},{}",
            normal_two_sided_p(z),
            b - z95 * se,
            b + z95 * se
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Estimator {
    Lpm,
    Mlogit,
    Gmm,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Lpm => "lpm",
            Estimator::Mlogit => "mlogit",
            Estimator::Gmm => "gmm",
        }
    }
}

pub fn estimate(estimator: Estimator, config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let seed = seed.unwrap_or(0);
    let mut timings = Timings::default();
    let name = estimator.name();
    let (output, coefs, ses, n_in, n_obs, diagnostics) = match estimator {
        Estimator::Lpm => {
            let (cfg, echo) = config::load::<LpmConfig>(config_path)?;
            let frame = timings.time("read", || read_panel(config_path, &cfg.panel, &cfg.categorical))?;
            let fit = timings.time("fit", || fit_lpm(&frame, &cfg.spec)).map_err(|e| match e {
                LpmError::Frame(_) | LpmError::InvalidSpec(_) => CliError::Config(e.to_string()),
                other => numerical(other),
            })?;
            let unit_interval = if cfg.unit_interval {
                let (refit, report) =
                    timings.time("unit_interval", || unit_interval_refit(&fit, &frame)).map_err(numerical)?;
                Some(json!({ "report": report, "result": refit.result }))
            } else {
                None
            };
            let r = &fit.result;
            let diagnostics = json!({
                "r_squared": r.r_squared,
                "within_r_squared": r.within_r_squared,
                "n_clusters": r.n_clusters,
                "fe_iterations": r.fe_iterations,
                "warnings": r.warnings,
            });
            let output = EstimateOutput {
                estimator: name.into(),
                seed,
                config: echo,
                result: to_value(r)?,
                unit_interval,
                curve: None,
            };
            (output, r.coefficients.clone(), r.std_errors.clone(), frame.n_rows(), r.n_obs, diagnostics)
        }
        Estimator::Mlogit => {
            let (cfg, echo) = config::load::<MlogitConfig>(config_path)?;
            let frame = timings.time("read", || read_panel(config_path, &cfg.panel, &cfg.categorical))?;
            let nested = NestedData::from_frame(&frame, &cfg.dv, &cfg.regressors, cfg.nesting)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let fit = timings.time("fit", || fit_mixed_logit(&nested, &cfg.options)).map_err(numerical)?;
            let curve = match &cfg.curve {
                Some(c) => Some(Curve {
                    variable: c.variable.clone(),
                    points: marginal_effect_curve(&fit, &c.variable, c.from, c.to, c.step)
                        .map_err(|e| CliError::Config(e.to_string()))?,
                }),
                None => None,
            };
            let diagnostics = json!({
                "loglik": fit.loglik,
                "iterations": fit.iterations,
                "max_abs_gradient": fit.max_abs_gradient,
                "icc": fit.icc,
                "variance_components": fit.variance_components,
                "warnings": fit.warnings,
            });
            let output =
                EstimateOutput { estimator: name.into(), seed, config: echo, result: to_value(&fit)?, unit_interval: None, curve };
            (output, fit.coefficients.clone(), fit.std_errors.clone(), frame.n_rows(), fit.n_obs, diagnostics)
        }
        Estimator::Gmm => {
            let (cfg, echo) = config::load::<GmmConfig>(config_path)?;
            let frame = timings.time("read", || read_panel(config_path, &cfg.panel, &cfg.categorical))?;
            let fit = timings.time("fit", || fit_system_gmm(&frame, &cfg.spec)).map_err(|e| match e {
                migrate_rum::gmm::GmmError::InvalidSpec(_) | migrate_rum::gmm::GmmError::Frame(_) => {
                    CliError::Config(e.to_string())
                }
                other => numerical(other),
            })?;
            let diagnostics = json!({
                "n_instruments": fit.n_instruments,
                "hansen_j": fit.hansen_j,
                "ar_tests": fit.ar_tests,
                "advisory": fit.advisory,
                "warnings": fit.warnings,
            });
            let n_obs = fit.n_diff_rows + fit.n_level_rows;
            let output = EstimateOutput { estimator: name.into(), seed, config: echo, result: to_value(&fit)?, unit_interval: None, curve: None };
            (output, fit.coefficients.clone(), fit.std_errors.clone(), frame.n_rows(), n_obs, diagnostics)
        }
    };
    let out = OutDir::create(out)?;
    let written = vec![
        out.write_json(&format!("{name}_result.json"), &output)?,
        out.write_text(&format!("{name}_coefficients.csv"), &coefficient_table(&coefs, &ses))?,
    ];
    let mut report = RunReport::new("estimate", output.config.clone(), seed);
    report.estimator = Some(name.into());
    report.rows_in = n_in;
    report.rows_out = n_obs;
    report.diagnostics = diagnostics;
    report.finish(&out, &format!("run_estimate_{name}.json"), timings, written)
}

fn collect_results(dirs: &[PathBuf]) -> CliResult<Vec<(PathBuf, EstimateOutput)>> {
    let mut found = BTreeMap::new();
    for dir in dirs {
        let Ok(entries) = std::fs::read_dir(dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            let is_result = path.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.ends_with("_result.json"));
            if is_result {
                let text = std::fs::read_to_string(&path).map_err(data)?;
                let parsed: EstimateOutput =
                    serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
                found.insert(path, parsed);
            }
        }
    }
    Ok(found.into_iter().collect())
}

fn fmt_opt(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

fn coefficient_block(md: &mut String, result: &Value) {
    let (Some(coefs), Some(ses)) = (result["coefficients"].as_object(), result["std_errors"].as_object()) else {
        return;
    };
    md.push_str("| term | estimate | std. error |\n|---|---:|---:|\n");
    for (name, b) in coefs {
        let _ = writeln!(md, "| {name} | {} | {} |", fmt_opt(b), fmt_opt(&ses[name]));
    }
    md.push('\n');
}

pub fn report(config_path: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let (cfg, echo) = match config_path {
        Some(p) => config::load::<ReportConfig>(p)?,
        None => (ReportConfig::default(), Value::Null),
    };
    let mut dirs = vec![out.to_path_buf()];
    dirs.extend(cfg.inputs.iter().map(|p| match config_path.and_then(Path::parent) {
        Some(base) if p.is_relative() => base.join(p),
        _ => p.clone(),
    }));
    let mut timings = Timings::default();
    let results = timings.time("collect", || collect_results(&dirs))?;
    if results.is_empty() {
        return Err(CliError::Data(format!("no estimation results (*_result.json) found in {dirs:?}")));
    }
    let out = OutDir::create(out)?;
    let mut md = String::from("# Estimation summary\n\n");
    let mut written = Vec::new();
    for (path, r) in &results {
        let _ = writeln!(md, "## {} (`{}`)\n", r.estimator.to_uppercase(), path.display());
        let res = &r.result;
        let _ = writeln!(md, "Observations: {}. Seed: {}.\n", res["n_obs"], r.seed);
        coefficient_block(&mut md, res);
        match r.estimator.as_str() {
            "lpm" => {
                let _ = writeln!(
                    md,
                    "R²: {}. Within R²: {}. Clusters: {}.\n",
                    fmt_opt(&res["r_squared"]),
                    fmt_opt(&res["within_r_squared"]),
                    res["n_clusters"]
                );
                if let Some(ui) = &r.unit_interval {
                    let rep = &ui["report"];
                    let _ = writeln!(
                        md,
                        "### Unit-interval subsample\n\nBelow 0: {} ({}). Above 1: {} ({}). Kept: {}.\n",
                        rep["n_below_0"],
                        fmt_opt(&rep["share_below_0"]),
                        rep["n_above_1"],
                        fmt_opt(&rep["share_above_1"]),
                        rep["n_in_range"]
                    );
                    coefficient_block(&mut md, &ui["result"]);
                }
            }
            "mlogit" => {
                md.push_str("### Intraclass correlation\n\n| level | variance | ICC |\n|---|---:|---:|\n");
                let comps = res["variance_components"].as_array().cloned().unwrap_or_default();
                let iccs = res["icc"].as_array().cloned().unwrap_or_default();
                for (c, icc) in comps.iter().zip(&iccs) {
                    let _ = writeln!(md, "| {} | {} | {} |", c["level"].as_str().unwrap_or("?"), fmt_opt(&c["variance"]), fmt_opt(icc));
                }
                let _ = writeln!(md, "\nLog-likelihood: {}.\n", fmt_opt(&res["loglik"]));
            }
            "gmm" => {
                let _ = writeln!(
                    md,
                    "Instruments: {}. Hansen J: {} (df {}, p {}). AR(1) p: {}. AR(2) p: {}.\n",
                    res["n_instruments"],
                    fmt_opt(&res["hansen_j"]["stat"]),
                    res["hansen_j"]["df"],
                    fmt_opt(&res["hansen_j"]["p"]),
                    fmt_opt(&res["ar_tests"]["1"]["p"]),
                    fmt_opt(&res["ar_tests"]["2"]["p"]),
                );
            }
            _ => {}
        }
        if let Some(curve) = &r.curve {
            let name = format!("marginal_effects_{}_{}.csv", r.estimator, curve.variable);
            written.push(out.write_with(&name, |w| {
                writeln!(w, "value,effect,std_error,ci_lower,ci_upper").map_err(data)?;
                for p in &curve.points {
                    let h = 1.959_963_984_540_054 * p.std_error;
                    writeln!(w, "{},{},{},{},{}", p.value, p.effect, p.std_error, p.effect - h, p.effect + h)
                        .map_err(data)?;
                }
                Ok(())
            })?);
            let _ = writeln!(md, "Marginal-effect curve for `{}`: {} points in `{name}`.\n", curve.variable, curve.points.len());
        }
    }
    written.push(out.write_text("summary.md", &md)?);
    let mut report = RunReport::new("report", echo, seed.unwrap_or(0));
    report.rows_in = results.len();
    report.rows_out = results.len();
    report.diagnostics = json!({ "results": results.iter().map(|(p, _)| p.display().to_string()).collect::<Vec<_>>() });
    report.finish(&out, "run_report.json", timings, written)
}
