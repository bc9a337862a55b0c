//! JSON configuration for each subcommand. Relative paths inside a config are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use migrate_rum::gmm::GmmSpec;
use migrate_rum::lpm::LpmSpec;
use migrate_rum::mlogit::{MixedLogitOptions, NestingSpec};
use migrate_rum::panel::PanelOptions;
use migrate_rum::rumsim::{Continuation, TrueCoefficients, WorldConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Columns read as categorical codes when present in a panel CSV.
pub const DEFAULT_CATEGORICAL: [&str; 7] = ["person_id", "family_id", "origin", "destination", "year", "sector", "unit"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub world: WorldConfig,
    #[serde(default = "default_individuals")]
    pub n_individuals: usize,
    #[serde(default = "no_effect")]
    pub coefficients: TrueCoefficients,
    #[serde(default)]
    pub continuation: Continuation,
}

fn default_individuals() -> usize {
    1_000
}

fn no_effect() -> TrueCoefficients {
    TrueCoefficients { trending: 0.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildPanelConfig {
    pub survey: PathBuf,
    pub city_stats: PathBuf,
    pub employment: PathBuf,
    #[serde(default)]
    pub options: PanelOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpmConfig {
    pub panel: PathBuf,
    #[serde(default)]
    pub categorical: Option<Vec<String>>,
    pub spec: LpmSpec,
    /// Also refit on rows whose fitted values lie in `[0, 1]`.
    #[serde(default)]
    pub unit_interval: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub variable: String,
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlogitConfig {
    pub panel: PathBuf,
    #[serde(default)]
    pub categorical: Option<Vec<String>>,
    #[serde(default = "default_dv")]
    pub dv: String,
    pub regressors: Vec<String>,
    #[serde(default)]
    pub nesting: NestingSpec,
    #[serde(default)]
    pub options: MixedLogitOptions,
    #[serde(default)]
    pub curve: Option<CurveSpec>,
}

fn default_dv() -> String {
    "migrate".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub panel: PathBuf,
    #[serde(default)]
    pub categorical: Option<Vec<String>>,
    pub spec: GmmSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Directories holding estimation outputs, besides `--out`.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

/// Parses `path` and returns the config together with its raw JSON echo.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<(T, serde_json::Value)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let parsed = T::deserialize(&raw)
        .map_err(|e| CliError::Config(format!("config {} does not match the schema: {e}", path.display())))?;
    Ok((parsed, raw))
}

/// Resolves `p` against the config directory and checks that it exists.
pub fn input_path(config: &Path, p: &Path) -> CliResult<PathBuf> {
    let resolved = if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or_else(|| Path::new(".")).join(p)
    };
    if !resolved.is_file() {
        return Err(CliError::Config(format!("input file {} does not exist", resolved.display())));
    }
    Ok(resolved)
}

pub fn categorical(list: &Option<Vec<String>>) -> Vec<String> {
    match list {
        Some(names) => names.clone(),
        None => DEFAULT_CATEGORICAL.iter().map(|s| s.to_string()).collect(),
    }
}
