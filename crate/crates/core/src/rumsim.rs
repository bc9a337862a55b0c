//! Reference-dependent random-utility model of migration.
//!
//! A world is a set of cities with deterministic payoffs `w`, moving costs
//! `c` and a discount factor `β`. The continuation value of residing in a
//! city is the logsum recursion
//!
//! ```text
//! Δ_t^k = τ + ln Σ_q exp(w_{q,t} − c_{kq,t} + β Δ_{t+1}^q)
//! ```
//!
//! with payoffs frozen at their final-year values beyond the horizon.
//! Individuals draw zero-mean type-1 extreme-value shocks for every city and
//! move to the utility-maximizing one.

use std::collections::BTreeMap;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::city::CityId;
use crate::frame::Frame;
use crate::trending::Sector;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RumError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("value iteration did not converge: residual {residual:.3e} after {iterations} sweeps")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("log continuation value undefined for nonpositive value {0}")]
    DomainError(f64),
    #[error("city {0} is not part of the world")]
    UnknownCity(CityId),
    #[error("sector {0} is not part of the world")]
    UnknownSector(Sector),
    #[error("year {0} is outside the horizon")]
    UnknownYear(i32),
}

/// Moving cost entry; `null` or `"inf"` in JSON encodes a prohibitive cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Cost(pub f64);

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
            Null(()),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Cost(v)),
            Raw::Null(()) => Ok(Cost(f64::INFINITY)),
            Raw::Text(s) if s.eq_ignore_ascii_case("inf") => Ok(Cost(f64::INFINITY)),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("invalid cost `{s}`"))),
        }
    }
}

/// Moving costs, either constant over time (`[from][to]`) or per year
/// (`[year][from][to]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSchedule {
    Static(Vec<Vec<Cost>>),
    ByYear(Vec<Vec<Vec<Cost>>>),
}

impl CostSchedule {
    pub fn uniform(n: usize, cost: f64) -> Self {
        CostSchedule::Static(
            (0..n)
                .map(|j| (0..n).map(|k| Cost(if j == k { 0.0 } else { cost })).collect())
                .collect(),
        )
    }

    fn get(&self, year_idx: usize, from: usize, to: usize) -> f64 {
        match self {
            CostSchedule::Static(m) => m[from][to].0,
            CostSchedule::ByYear(m) => m[year_idx.min(m.len() - 1)][from][to].0,
        }
    }
}

/// Deterministic primitives of a simulated economy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub cities: Vec<CityId>,
    pub sectors: Vec<Sector>,
    /// First and last decision year, inclusive.
    pub horizon: (i32, i32),
    /// Instantaneous utility `w[city][year]`, shared by all sectors.
    pub w: Vec<Vec<f64>>,
    /// Sector-specific overrides of `w`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sector_w: BTreeMap<Sector, Vec<Vec<f64>>>,
    pub cost: CostSchedule,
    /// Job-trending indicator `trending[sector][city][year]`; zero when absent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub trending: BTreeMap<Sector, Vec<Vec<f64>>>,
    pub beta: f64,
    pub r: f64,
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

impl WorldConfig {
    /// World with a constant payoff in every city and year and a uniform
    /// off-diagonal moving cost.
    pub fn uniform(n_cities: usize, horizon: (i32, i32), w: f64, cost: f64, beta: f64) -> Self {
        let n_years = (horizon.1 - horizon.0 + 1) as usize;
        Self {
            cities: (0..n_cities as u32).map(|c| CityId::new(1000 + c)).collect(),
            sectors: vec![Sector::Total],
            horizon,
            w: vec![vec![w; n_years]; n_cities],
            sector_w: BTreeMap::new(),
            cost: CostSchedule::uniform(n_cities, cost),
            trending: BTreeMap::new(),
            beta,
            r: 0.9,
            seed: 0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn n_cities(&self) -> usize {
        self.cities.len()
    }

    pub fn n_years(&self) -> usize {
        (self.horizon.1 - self.horizon.0 + 1).max(0) as usize
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.horizon.0..=self.horizon.1
    }

    pub fn validate(&self) -> Result<(), RumError> {
        let bad = |msg: String| Err(RumError::InvalidWorld(msg));
        let (n, t) = (self.n_cities(), self.n_years());
        if n == 0 {
            return bad("no cities".into());
        }
        if self.sectors.is_empty() {
            return bad("no sectors".into());
        }
        if t == 0 {
            return bad(format!("empty horizon {:?}", self.horizon));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta = {} must lie in [0, 1)", self.beta));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad(format!("r = {} must lie in (0, 1)", self.r));
        }
        let check_grid = |name: &str, grid: &Vec<Vec<f64>>| -> Result<(), RumError> {
            if grid.len() != n || grid.iter().any(|row| row.len() != t) {
                return Err(RumError::InvalidWorld(format!("{name} must be {n} cities x {t} years")));
            }
            if grid.iter().flatten().any(|v| !v.is_finite()) {
                return Err(RumError::InvalidWorld(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        check_grid("w", &self.w)?;
        for (s, grid) in &self.sector_w {
            check_grid(&format!("sector_w[{s}]"), grid)?;
        }
        for (s, grid) in &self.trending {
            check_grid(&format!("trending[{s}]"), grid)?;
        }
        let matrices: Vec<&Vec<Vec<Cost>>> = match &self.cost {
            CostSchedule::Static(m) => vec![m],
            CostSchedule::ByYear(ms) => {
                if ms.len() != t {
                    return bad(format!("cost schedule has {} years, horizon has {t}", ms.len()));
                }
                ms.iter().collect()
            }
        };
        for m in matrices {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return bad(format!("cost matrix must be {n} x {n}"));
            }
            for (j, row) in m.iter().enumerate() {
                if row[j].0 != 0.0 {
                    return bad(format!("cost of staying in {} must be 0", self.cities[j]));
                }
                if row.iter().any(|c| c.0.is_nan() || c.0 < 0.0) {
                    return bad("costs must be nonnegative".into());
                }
            }
        }
        Ok(())
    }

    pub fn city_index(&self, city: CityId) -> Result<usize, RumError> {
        self.cities.iter().position(|&c| c == city).ok_or(RumError::UnknownCity(city))
    }

    pub fn sector_index(&self, sector: Sector) -> Result<usize, RumError> {
        self.sectors.iter().position(|&s| s == sector).ok_or(RumError::UnknownSector(sector))
    }

    /// Index of `year` in the payoff grids; years past the horizon map to the
    /// final year.
    fn payoff_index(&self, year: i32) -> Result<usize, RumError> {
        if year < self.horizon.0 {
            return Err(RumError::UnknownYear(year));
        }
        Ok(((year - self.horizon.0) as usize).min(self.n_years() - 1))
    }

    fn flow_at(&self, sector: Sector, city: usize, year_idx: usize) -> f64 {
        self.sector_w.get(&sector).unwrap_or(&self.w)[city][year_idx]
    }

    fn cost_at(&self, year_idx: usize, from: usize, to: usize) -> f64 {
        self.cost.get(year_idx, from, to)
    }

    pub fn trending_at(&self, sector: Sector, city: usize, year_idx: usize) -> f64 {
        self.trending.get(&sector).map_or(0.0, |g| g[city][year_idx])
    }

    pub fn flow(&self, sector: Sector, city: CityId, year: i32) -> Result<f64, RumError> {
        Ok(self.flow_at(sector, self.city_index(city)?, self.payoff_index(year)?))
    }

    pub fn cost(&self, from: CityId, to: CityId, year: i32) -> Result<f64, RumError> {
        Ok(self.cost_at(self.payoff_index(year)?, self.city_index(from)?, self.city_index(to)?))
    }

    /// Folds `coefficient × trending` into the instantaneous payoffs of every
    /// sector, so that log-odds between two cities carry
    /// `coefficient × (trending_k − trending_j)`.
    pub fn with_trending_payoffs(&self, coefficient: f64) -> WorldConfig {
        let mut world = self.clone();
        if coefficient == 0.0 || self.trending.is_empty() {
            return world;
        }
        let mut sector_w = BTreeMap::new();
        for &s in &self.sectors {
            let base = self.sector_w.get(&s).unwrap_or(&self.w);
            let grid = base
                .iter()
                .enumerate()
                .map(|(c, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(y, &w)| w + coefficient * self.trending_at(s, c, y))
                        .collect()
                })
                .collect();
            sector_w.insert(s, grid);
        }
        world.sector_w = sector_w;
        world
    }
}

/// Continuation values `Δ` per sector, year and city.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    first_year: i32,
    sectors: Vec<Sector>,
    cities: Vec<CityId>,
    /// `values[sector][year_offset][city]`, year offsets `0..=n_years`; the
    /// last offset is the stationary post-horizon value.
    values: Vec<Vec<Vec<f64>>>,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

impl ValueTable {
    /// `Δ` of residing in `city` at `year`. Years beyond the stored range
    /// return the stationary value.
    pub fn get(&self, city: CityId, year: i32, sector: Sector) -> Option<f64> {
        let s = self.sectors.iter().position(|&x| x == sector)?;
        let c = self.cities.iter().position(|&x| x == city)?;
        if year < self.first_year {
            return None;
        }
        let table = &self.values[s];
        let y = ((year - self.first_year) as usize).min(table.len() - 1);
        Some(table[y][c])
    }

    fn at(&self, sector: usize, year_offset: usize, city: usize) -> f64 {
        let table = &self.values[sector];
        table[year_offset.min(table.len() - 1)][city]
    }

    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Absolute rounding error a single sweep can introduce into a residual.
    pub fn rounding_allowance(&self) -> f64 {
        64.0 * f64::EPSILON * self.max_abs_value().max(1.0)
    }

    /// Largest ratio between successive sweep residuals, net of the rounding
    /// allowance. Sweeps whose residual is already at rounding level are
    /// skipped.
    pub fn max_contraction_ratio(&self) -> f64 {
        let floor = self.rounding_allowance();
        self.residuals
            .windows(2)
            .filter(|w| w[0] > floor)
            .map(|w| (w[1] - floor).max(0.0) / w[0])
            .fold(0.0, f64::max)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Solves the logsum recursion by repeated sweeps over the whole
/// (year × city) table until the sup-norm change falls below `tol`.
pub fn value_iteration(world: &WorldConfig, tol: f64) -> Result<ValueTable, RumError> {
    world.validate()?;
    if !(tol > 0.0) {
        return Err(RumError::InvalidWorld(format!("tolerance {tol} must be positive")));
    }
    let (n, t) = (world.n_cities(), world.n_years());
    let beta = world.beta;
    let mut values = vec![vec![vec![0.0; n]; t + 1]; world.sectors.len()];
    let mut next = values.clone();
    let mut residuals = Vec::new();
    loop {
        let mut residual: f64 = 0.0;
        for (s, &sector) in world.sectors.iter().enumerate() {
            for y in 0..=t {
                let payoff_year = y.min(t - 1);
                let ahead = &values[s][(y + 1).min(t)];
                for k in 0..n {
                    let v = EULER_GAMMA
                        + log_sum_exp((0..n).map(|q| {
                            world.flow_at(sector, q, payoff_year) - world.cost_at(payoff_year, k, q)
                                + beta * ahead[q]
                        }));
                    residual = residual.max((v - values[s][y][k]).abs());
                    next[s][y][k] = v;
                }
            }
        }
        std::mem::swap(&mut values, &mut next);
        residuals.push(residual);
        if !residual.is_finite() {
            return Err(RumError::NonConvergence { residual, iterations: residuals.len() });
        }
        if residual < tol {
            break;
        }
        if residuals.len() >= world.max_iterations {
            return Err(RumError::NonConvergence { residual, iterations: residuals.len() });
        }
    }
    Ok(ValueTable {
        first_year: world.horizon.0,
        sectors: world.sectors.clone(),
        cities: world.cities.clone(),
        values,
        residuals,
    })
}

/// Draws a zero-mean type-1 extreme-value shock by inverse CDF.
pub fn sample_ev1_shock<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    ev1_quantile(u)
}

/// `−ln(−ln u) − τ`.
pub fn ev1_quantile(u: f64) -> f64 {
    -(-u.ln()).ln() - EULER_GAMMA
}

/// Continuation payoff `g` periods ahead when a single move is planned:
/// `(r/β)^g · delta`.
pub fn one_shot_value(delta: f64, r: f64, beta: f64, g: u32) -> f64 {
    if g == 0 {
        return delta;
    }
    assert!(beta > 0.0, "one-shot discounting needs beta > 0 when g > 0");
    (r / beta).powi(g as i32) * delta
}

/// Which continuation value enters the utility index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Continuation {
    /// Logsum recursion value.
    #[default]
    Sequential,
    /// Single planned move, `g` periods ahead.
    OneShot { g: u32 },
}

/// Utility of an individual in `sector` living in `origin` who chooses `dest`
/// at `year`.
#[allow(clippy::too_many_arguments)]
pub fn utility(
    world: &WorldConfig,
    values: &ValueTable,
    sector: Sector,
    origin: CityId,
    dest: CityId,
    year: i32,
    shock: f64,
    continuation: Continuation,
) -> Result<f64, RumError> {
    let s = world.sector_index(sector)?;
    let (j, k) = (world.city_index(origin)?, world.city_index(dest)?);
    let y = world.payoff_index(year)?;
    let offset = (year - world.horizon.0) as usize;
    Ok(utility_at(world, values, s, j, k, y, offset, continuation) + shock)
}

#[allow(clippy::too_many_arguments)]
fn utility_at(
    world: &WorldConfig,
    values: &ValueTable,
    s: usize,
    j: usize,
    k: usize,
    payoff_year: usize,
    year_offset: usize,
    continuation: Continuation,
) -> f64 {
    let delta = values.at(s, year_offset + 1, k);
    let ahead = match continuation {
        Continuation::Sequential => delta,
        Continuation::OneShot { g } => one_shot_value(delta, world.r, world.beta, g),
    };
    let cost = if j == k { 0.0 } else { world.cost_at(payoff_year, j, k) };
    world.flow_at(world.sectors[s], k, payoff_year) + world.beta * ahead - cost
}

/// Softmax with max-subtraction.
pub fn choice_probabilities(utilities: &[f64]) -> Vec<f64> {
    assert!(!utilities.is_empty(), "choice set must be nonempty");
    let m = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|&u| (u - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogOddsForm {
    /// `β(Δ^k − Δ^j)`.
    Raw,
    /// `β ln(Δ^k / Δ^j)`.
    Log,
}

/// Log-odds of moving to `dest` over staying in `origin`.
pub fn log_odds(
    world: &WorldConfig,
    values: &ValueTable,
    sector: Sector,
    origin: CityId,
    dest: CityId,
    year: i32,
    form: LogOddsForm,
) -> Result<f64, RumError> {
    let s = world.sector_index(sector)?;
    let (j, k) = (world.city_index(origin)?, world.city_index(dest)?);
    let y = world.payoff_index(year)?;
    let offset = (year - world.horizon.0) as usize + 1;
    let (dk, dj) = (values.at(s, offset, k), values.at(s, offset, j));
    let base = world.flow_at(sector, k, y) - world.flow_at(sector, j, y)
        - if j == k { 0.0 } else { world.cost_at(y, j, k) };
    match form {
        LogOddsForm::Raw => Ok(base + world.beta * (dk - dj)),
        LogOddsForm::Log => {
            for d in [dk, dj] {
                if d <= 0.0 {
                    return Err(RumError::DomainError(d));
                }
            }
            Ok(base + world.beta * (dk / dj).ln())
        }
    }
}

/// Coefficients used when generating data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueCoefficients {
    /// Weight of the destination-minus-origin trending distance in the
    /// utility index.
    pub trending: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub world: WorldConfig,
    pub coefficients: TrueCoefficients,
    pub n_individuals: usize,
    pub value_tolerance: f64,
    pub continuation: Continuation,
}

/// One individual-year decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub individual_id: u64,
    pub sector: Sector,
    pub year: i32,
    pub origin: usize,
    pub chosen: usize,
    /// Realized utility of every city (deterministic part plus shock).
    pub utilities: Vec<f64>,
    /// Analytic choice probabilities of every city.
    pub probabilities: Vec<f64>,
}

/// One (individual, origin, candidate destination, year) row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimRow {
    pub individual_id: u64,
    pub sector: Sector,
    pub origin: CityId,
    pub destination: CityId,
    pub year: i32,
    pub moved: u8,
    pub distance_jobtrend: f64,
    pub choice_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub decisions: Vec<Decision>,
    pub generator_params: GeneratorParams,
}

pub const DEFAULT_VALUE_TOLERANCE: f64 = 1e-10;

/// Generates decision histories for `n_individuals`. Each individual has its
/// own counter-based stream (`seed`, stream = individual id), so the output
/// does not depend on evaluation order.
pub fn simulate_panel(
    world: &WorldConfig,
    n_individuals: usize,
    coefficients: TrueCoefficients,
    continuation: Continuation,
) -> Result<SimulatedPanel, RumError> {
    assert!(n_individuals >= 1, "need at least one individual");
    world.validate()?;
    let effective = world.with_trending_payoffs(coefficients.trending);
    let values = value_iteration(&effective, DEFAULT_VALUE_TOLERANCE)?;
    let simulate_one = |id: u64| simulate_individual(&effective, &values, world.seed, id, continuation);

    #[cfg(feature = "parallel")]
    let histories: Vec<Vec<Decision>> = {
        use rayon::prelude::*;
        (0..n_individuals as u64).into_par_iter().map(simulate_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let histories: Vec<Vec<Decision>> = (0..n_individuals as u64).map(simulate_one).collect();

    Ok(SimulatedPanel {
        decisions: histories.into_iter().flatten().collect(),
        generator_params: GeneratorParams {
            world: world.clone(),
            coefficients,
            n_individuals,
            value_tolerance: DEFAULT_VALUE_TOLERANCE,
            continuation,
        },
    })
}

fn simulate_individual(
    world: &WorldConfig,
    values: &ValueTable,
    seed: u64,
    id: u64,
    continuation: Continuation,
) -> Vec<Decision> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let n = world.n_cities();
    let s = rng.random_range(0..world.sectors.len());
    let mut location = rng.random_range(0..n);
    let mut out = Vec::with_capacity(world.n_years());
    for (offset, year) in world.years().enumerate() {
        let deterministic: Vec<f64> = (0..n)
            .map(|k| utility_at(world, values, s, location, k, offset, offset, continuation))
            .collect();
        let utilities: Vec<f64> = deterministic.iter().map(|u| u + sample_ev1_shock(&mut rng)).collect();
        let chosen = argmax(&utilities);
        out.push(Decision {
            individual_id: id,
            sector: world.sectors[s],
            year,
            origin: location,
            chosen,
            utilities,
            probabilities: choice_probabilities(&deterministic),
        });
        location = chosen;
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl SimulatedPanel {
    pub fn world(&self) -> &WorldConfig {
        &self.generator_params.world
    }

    pub fn move_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.chosen != d.origin).count()
    }

    /// Expands decisions into one row per alternative destination `k ≠ j`.
    /// `moved = 1` on at most one row per individual-year, only in move years.
    pub fn rows(&self) -> impl Iterator<Item = SimRow> + '_ {
        let world = self.world();
        self.decisions.iter().flat_map(move |d| {
            let y = (d.year - world.horizon.0) as usize;
            let t_origin = world.trending_at(d.sector, d.origin, y);
            (0..world.n_cities()).filter(move |&k| k != d.origin).map(move |k| SimRow {
                individual_id: d.individual_id,
                sector: d.sector,
                origin: world.cities[d.origin],
                destination: world.cities[k],
                year: d.year,
                moved: u8::from(d.chosen == k),
                distance_jobtrend: world.trending_at(d.sector, k, y) - t_origin,
                choice_prob: d.probabilities[k],
            })
        })
    }

    /// Dyad rows as an estimation frame: numeric `moved`,
    /// `distance_jobtrend`, `choice_prob`; categorical `person_id`, `origin`,
    /// `destination`, `year`, `sector`.
    pub fn to_frame(&self) -> Frame {
        let rows: Vec<SimRow> = self.rows().collect();
        let mut frame = Frame::new(rows.len());
        frame.push_numeric("moved", rows.iter().map(|r| f64::from(r.moved)).collect());
        frame.push_numeric("distance_jobtrend", rows.iter().map(|r| r.distance_jobtrend).collect());
        frame.push_numeric("choice_prob", rows.iter().map(|r| r.choice_prob).collect());
        frame.push_categorical("person_id", rows.iter().map(|r| r.individual_id as i64).collect());
        frame.push_categorical("origin", rows.iter().map(|r| i64::from(r.origin.code())).collect());
        frame.push_categorical("destination", rows.iter().map(|r| i64::from(r.destination.code())).collect());
        frame.push_categorical("year", rows.iter().map(|r| i64::from(r.year)).collect());
        frame.push_categorical("sector", rows.iter().map(|r| r.sector.code()).collect());
        frame
    }

    /// CSV of [`SimulatedPanel::rows`].
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in self.rows() {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
