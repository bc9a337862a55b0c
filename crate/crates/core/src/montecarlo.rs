//! Data-generating designs with known parameters for recovery studies.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::frame::Frame;
use crate::lpm::{fit_lpm, ClusterDim, FactorDim, FixedEffectSpec, LpmError, LpmSpec};
use crate::mlogit::NestedData;
use crate::rumsim::{simulate_panel, Continuation, RumError, TrueCoefficients, WorldConfig};
use crate::stats::logistic;
use crate::trending::Sector;

/// Migration economy whose payoffs load on a random job-trending surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDesign {
    pub n_individuals: usize,
    pub n_cities: usize,
    pub horizon: (i32, i32),
    pub trending_sd: f64,
    pub cost: f64,
    pub beta: f64,
    pub coefficient: f64,
}

impl Default for RecoveryDesign {
    /// 2 500 individuals over 20 years: 50 000 person-years.
    fn default() -> Self {
        Self {
            n_individuals: 2_500,
            n_cities: 5,
            horizon: (1998, 2017),
            trending_sd: 2.0,
            cost: 2.0,
            beta: 0.9,
            coefficient: 0.15,
        }
    }
}

impl RecoveryDesign {
    pub fn world(&self, seed: u64) -> WorldConfig {
        let mut world = WorldConfig::uniform(self.n_cities, self.horizon, 0.0, self.cost, self.beta);
        world.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e5d_u64);
        let normal = Normal::new(0.0, self.trending_sd).expect("positive sd");
        let grid = (0..self.n_cities)
            .map(|_| (0..world.n_years()).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        world.trending.insert(Sector::Total, grid);
        world
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryOutcome {
    pub estimate: f64,
    pub std_error: f64,
    /// Projection of the analytic choice probabilities on the same design:
    /// the quantity the linear probability model estimates.
    pub target: f64,
    pub covered: bool,
    pub sign_correct: bool,
    pub n_obs: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Rum(#[from] RumError),
    #[error(transparent)]
    Lpm(#[from] LpmError),
}

/// Simulates one panel and fits the time/origin/destination LPM of the move
/// indicator on the trending distance, clustering by person.
pub fn lpm_recovery(design: &RecoveryDesign, seed: u64) -> Result<RecoveryOutcome, RecoveryError> {
    let world = design.world(seed);
    let panel = simulate_panel(
        &world,
        design.n_individuals,
        TrueCoefficients { trending: design.coefficient },
        Continuation::Sequential,
    )?;
    let frame = panel.to_frame();
    let factors = FixedEffectSpec::new(vec![FactorDim::Time, FactorDim::Origin, FactorDim::Destination])?;
    let cluster = ClusterDim::Column("person_id".into());
    let fit = fit_lpm(&frame, &LpmSpec::new("moved", &["distance_jobtrend"], factors.clone(), cluster.clone()))?;
    let target = fit_lpm(&frame, &LpmSpec::new("choice_prob", &["distance_jobtrend"], factors, cluster))?;
    let estimate = fit.result.coefficient("distance_jobtrend").expect("requested");
    let std_error = fit.result.std_error("distance_jobtrend").expect("requested");
    let target = target.result.coefficient("distance_jobtrend").expect("requested");
    Ok(RecoveryOutcome {
        estimate,
        std_error,
        target,
        covered: (estimate - target).abs() <= 1.959_963_984_540_054 * std_error,
        sign_correct: estimate.signum() == design.coefficient.signum(),
        n_obs: fit.result.n_obs,
    })
}

/// Random-intercept logit: `Pr(y=1) = Λ(b0 + b1·x + u_c)`, `u_c ~ N(0, σ²)`,
/// `x ~ N(0, 1)`.
pub fn random_intercept_logit(
    seed: u64,
    clusters: usize,
    per_cluster: usize,
    sigma2: f64,
    beta: (f64, f64),
) -> NestedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clusters * per_cluster;
    let (mut y, mut x, mut top) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for c in 0..clusters {
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = sigma2.sqrt() * z;
        for _ in 0..per_cluster {
            let xi: f64 = StandardNormal.sample(&mut rng);
            y.push(f64::from(rng.random::<f64>() < logistic(beta.0 + beta.1 * xi + u)));
            x.push(xi);
            top.push(c as u32);
        }
    }
    let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    NestedData::new(y, xm, vec!["_cons".into(), "x".into()], &top, None).expect("well-formed design")
}

/// Static panel `y = β·x + α_i + ε` with `x` correlated with both the unit
/// effect and the contemporaneous error:
/// `x_t = ρ·x_{t−1} + γ·α_i + δ·ε_t + v_t`, started from its stationary
/// distribution so that lagged differences are valid level instruments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndogenousPanelDesign {
    pub units: usize,
    pub periods: usize,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for EndogenousPanelDesign {
    fn default() -> Self {
        Self { units: 300, periods: 6, beta: 1.0, rho: 0.5, gamma: 1.0, delta: 0.5 }
    }
}

impl EndogenousPanelDesign {
    /// Frame with categorical `unit`, `year` and numeric `y`, `x`.
    pub fn generate(&self, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.units * self.periods;
        let (mut unit, mut year, mut ys, mut xs) = (vec![], vec![], vec![], vec![]);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        // Stationary variance of the idiosyncratic part δ·ε + v.
        let innov_var = self.delta * self.delta + 1.0;
        let sd0 = (innov_var / (1.0 - self.rho * self.rho)).sqrt();
        for i in 0..self.units {
            let alpha = draw();
            let mean = self.gamma * alpha / (1.0 - self.rho);
            let mut x_prev = mean + sd0 * draw();
            for t in 0..self.periods {
                let eps = draw();
                let x = self.rho * x_prev + self.gamma * alpha + self.delta * eps + draw();
                unit.push(i as i64);
                year.push(2000 + t as i64);
                xs.push(x);
                ys.push(self.beta * x + alpha + eps);
                x_prev = x;
            }
        }
        let mut frame = Frame::new(n);
        frame.push_categorical("unit", unit);
        frame.push_categorical("year", year);
        frame.push_numeric("y", ys);
        frame.push_numeric("x", xs);
        frame
    }
}
