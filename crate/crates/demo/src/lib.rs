//! WebAssembly bindings for a static browser page. Every export takes plain
//! numbers and returns a JSON string, so the page needs no bundler.

use migrate_rum::mlogit::icc;
use migrate_rum::rumsim::{
    choice_probabilities, utility, value_iteration, Continuation, CostSchedule, WorldConfig,
};
use migrate_rum::trending::{trending_distance, trending_distance_log, StartedLogOffset, TrendingValue, Sector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const YEAR: i32 = 2017;

#[derive(Debug, Serialize, PartialEq)]
pub struct ChoiceOutcome {
    /// Continuation value of residing in each city.
    pub values: Vec<f64>,
    pub utilities: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub iterations: usize,
}

/// Choice probabilities of someone living in `origin`, with payoffs
/// `payoffs[k] + coefficient · trending[k]` and a common moving cost. A
/// positive `horizon_g` plans a single move `g` periods ahead instead of the
/// full logsum recursion.
pub fn choice_outcome(
    payoffs: &[f64],
    trending: &[f64],
    coefficient: f64,
    cost: f64,
    beta: f64,
    origin: usize,
    horizon_g: u32,
) -> Result<ChoiceOutcome, String> {
    let n = payoffs.len();
    if n == 0 || trending.len() != n {
        return Err("payoffs and trending need one entry per city".into());
    }
    if origin >= n {
        return Err(format!("origin {origin} out of range for {n} cities"));
    }
    let mut world = WorldConfig::uniform(n, (YEAR, YEAR), 0.0, cost, beta);
    world.w = payoffs.iter().map(|&w| vec![w]).collect();
    world.cost = CostSchedule::uniform(n, cost);
    world.trending.insert(Sector::Total, trending.iter().map(|&t| vec![t]).collect());
    let world = world.with_trending_payoffs(coefficient);
    let table = value_iteration(&world, 1e-10).map_err(|e| e.to_string())?;
    let continuation = if horizon_g == 0 { Continuation::Sequential } else { Continuation::OneShot { g: horizon_g } };
    let here = world.cities[origin];
    let utilities = world
        .cities
        .iter()
        .map(|&k| utility(&world, &table, Sector::Total, here, k, YEAR, 0.0, continuation))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let values = world
        .cities
        .iter()
        .map(|&k| table.get(k, YEAR, Sector::Total).unwrap_or(f64::NAN))
        .collect();
    Ok(ChoiceOutcome { values, probabilities: choice_probabilities(&utilities), utilities, iterations: table.iterations() })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct DistancePoint {
    pub destination: f64,
    pub distance: f64,
    pub log_distance: f64,
}

/// Raw and started-log distances from a fixed origin indicator over a grid
/// of destination indicators.
pub fn distance_curve(origin: f64, from: f64, to: f64, points: usize, c: f64) -> Result<Vec<DistancePoint>, String> {
    if points < 2 || !(to > from) {
        return Err("need at least two points and to > from".into());
    }
    let offset = StartedLogOffset::new(c).map_err(|e| e.to_string())?;
    let o = TrendingValue::new(origin, YEAR);
    (0..points)
        .map(|i| {
            let destination = from + (to - from) * i as f64 / (points - 1) as f64;
            let d = TrendingValue::new(destination, YEAR);
            Ok(DistancePoint {
                destination,
                distance: trending_distance(o, d).map_err(|e| e.to_string())?,
                log_distance: trending_distance_log(o, d, offset).map_err(|e| e.to_string())?,
            })
        })
        .collect()
}

/// Intraclass correlations, top level first.
pub fn icc_values(variances: &[f64]) -> Result<Vec<f64>, String> {
    if variances.is_empty() || variances.iter().any(|v| !(*v >= 0.0)) {
        return Err("variances must be nonnegative".into());
    }
    Ok(icc(variances))
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = choiceProbabilities)]
pub fn choice_probabilities_js(
    payoffs: &[f64],
    trending: &[f64],
    coefficient: f64,
    cost: f64,
    beta: f64,
    origin: usize,
    horizon_g: u32,
) -> Result<String, JsValue> {
    to_js(choice_outcome(payoffs, trending, coefficient, cost, beta, origin, horizon_g))
}

#[wasm_bindgen(js_name = distanceCurve)]
pub fn distance_curve_js(origin: f64, from: f64, to: f64, points: usize, c: f64) -> Result<String, JsValue> {
    to_js(distance_curve(origin, from, to, points, c))
}

#[wasm_bindgen(js_name = intraclassCorrelation)]
pub fn icc_js(variances: &[f64]) -> Result<String, JsValue> {
    to_js(icc_values(variances))
}
