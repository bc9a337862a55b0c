//! Random-intercept logistic regression with two or three nested levels.
//!
//! The marginal likelihood is integrated by adaptive Gauss–Hermite
//! quadrature, nested for three levels. Variance parameters are optimized as
//! log standard deviations; derivatives are taken numerically from the
//! per-cluster log-likelihood vector, which also yields the cluster scores for
//! robust standard errors.

use std::f64::consts::{PI, SQRT_2};
use std::ops::Range;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::linalg;
use crate::lpm::{factor_groups, serialize_matrix, FactorDim};
use crate::stats::{log1p_exp, logistic};

pub const DEFAULT_NODES: usize = 7;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Lower clamp on log standard deviations; the variance there is ~4e-11.
pub const LOG_SD_FLOOR: f64 = -12.0;
/// Latent residual variance of the logistic link.
pub const LOGISTIC_VARIANCE: f64 = PI * PI / 3.0;

#[derive(Debug, Error)]
pub enum MixedLogitError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("optimizer stopped after {iterations} iterations with max |gradient| {gradient:.3e}")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("information matrix is singular")]
    SingularInformation,
}

/// Grouping that forms the city level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CityLevel {
    Origin,
    #[default]
    Destination,
    Pair,
}

impl CityLevel {
    fn factor(self) -> FactorDim {
        match self {
            CityLevel::Origin => FactorDim::Origin,
            CityLevel::Destination => FactorDim::Destination,
            CityLevel::Pair => FactorDim::Pair,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CityLevel::Origin => "origin",
            CityLevel::Destination => "destination",
            CityLevel::Pair => "pair",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestingSpec {
    pub level2: CityLevel,
    /// Nest schooling groups beneath cities, which then become level 3.
    #[serde(default)]
    pub level3_education: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedLogitOptions {
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_max_iter")]
    pub max_iterations: usize,
    #[serde(default)]
    pub robust: bool,
}

fn default_nodes() -> usize {
    DEFAULT_NODES
}
fn default_max_iter() -> usize {
    200
}

impl Default for MixedLogitOptions {
    fn default() -> Self {
        Self { nodes: DEFAULT_NODES, max_iterations: 200, robust: false }
    }
}

/// Gauss–Hermite rule for the weight `exp(-x²)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one node");
        let pim4 = PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        x.reverse();
        w.reverse();
        Self { nodes: x, weights: w }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `ln ∫ exp(h(u)) du` centred at `mode` with scale `scale`.
    fn log_integral(&self, mode: f64, scale: f64, mut h: impl FnMut(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w.ln() + x * x + h(mode + SQRT_2 * scale * x))
            .collect();
        (SQRT_2 * scale).ln() + log_sum_exp(&terms)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_normal_density(u: f64, sd: f64) -> f64 {
    -0.5 * (u / sd).powi(2) - sd.ln() - 0.5 * (2.0 * PI).ln()
}

/// Intra-class correlations for nested variances listed from the top level
/// down: entry `l` is the share of latent variance shared by observations in
/// the same level-`l` group.
pub fn icc(level_variances: &[f64]) -> Vec<f64> {
    let total: f64 = level_variances.iter().sum::<f64>() + LOGISTIC_VARIANCE;
    let mut acc = 0.0;
    level_variances
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect()
}

/// Observations grouped for integration. Rows are sorted so that every
/// level-2 group is a contiguous range.
#[derive(Debug, Clone)]
pub struct NestedData {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Top clusters, each holding its level-2 ranges (one range when there are
    /// only two levels).
    clusters: Vec<Vec<Range<usize>>>,
    three_level: bool,
    pub top_label: String,
    pub mid_label: Option<String>,
}

impl NestedData {
    /// `top` gives the top-level group of each row; `mid`, when present, the
    /// level-2 group nested in it.
    pub fn new(
        y: Vec<f64>,
        x: DMatrix<f64>,
        names: Vec<String>,
        top: &[u32],
        mid: Option<&[u32]>,
    ) -> Result<Self, MixedLogitError> {
        let n = y.len();
        if n == 0 {
            return Err(MixedLogitError::InvalidInput("no observations".into()));
        }
        if x.nrows() != n || top.len() != n || mid.is_some_and(|m| m.len() != n) || names.len() != x.ncols() {
            return Err(MixedLogitError::InvalidInput("dimension mismatch".into()));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MixedLogitError::InvalidInput("outcome must be 0/1".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (top[i], mid.map_or(0, |m| m[i]), i));
        let ys = order.iter().map(|&i| y[i]).collect();
        let xs = DMatrix::from_fn(n, x.ncols(), |r, c| x[(order[r], c)]);
        let mut clusters: Vec<Vec<Range<usize>>> = Vec::new();
        let mut start = 0;
        for r in 1..=n {
            let split_top = r == n || top[order[r]] != top[order[r - 1]];
            let split_mid = split_top || mid.is_some_and(|m| m[order[r]] != m[order[r - 1]]);
            if split_mid {
                if start == 0 || top[order[start]] != top[order[start - 1]] {
                    clusters.push(Vec::new());
                }
                clusters.last_mut().expect("pushed").push(start..r);
                start = r;
            }
        }
        Ok(Self {
            y: ys,
            x: xs,
            names,
            clusters,
            three_level: mid.is_some(),
            top_label: "cluster".into(),
            mid_label: mid.map(|_| "group".into()),
        })
    }

    /// Builds the design from a frame: an intercept plus `regressors`,
    /// grouped by the city level and optionally by schooling within city.
    pub fn from_frame(frame: &Frame, dv: &str, regressors: &[String], nesting: NestingSpec) -> Result<Self, MixedLogitError> {
        let yv = frame.values(dv)?;
        let xs = regressors.iter().map(|r| frame.values(r)).collect::<Result<Vec<_>, _>>()?;
        let city = factor_groups(frame, nesting.level2.factor())?;
        let school = if nesting.level3_education { Some(frame.values("schooling")?) } else { None };
        let rows: Vec<usize> = (0..frame.n_rows())
            .filter(|&i| {
                yv[i].is_finite()
                    && xs.iter().all(|c| c[i].is_finite())
                    && city[i].is_some()
                    && school.as_ref().is_none_or(|s| s[i].is_finite())
            })
            .collect();
        let n = rows.len();
        let y: Vec<f64> = rows.iter().map(|&i| yv[i]).collect();
        let x = DMatrix::from_fn(n, regressors.len() + 1, |r, c| if c == 0 { 1.0 } else { xs[c - 1][rows[r]] });
        let mut names = vec!["_cons".to_string()];
        names.extend(regressors.iter().cloned());
        let top: Vec<u32> = rows.iter().map(|&i| city[i].expect("filtered")).collect();
        let mid: Option<Vec<u32>> = school.map(|s| rows.iter().map(|&i| s[i].round() as i64 as u32).collect());
        let mut data = Self::new(y, x, names, &top, mid.as_deref())?;
        data.top_label = nesting.level2.label().into();
        data.mid_label = nesting.level3_education.then(|| format!("schooling|{}", nesting.level2.label()));
        Ok(data)
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_top(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_mid(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_three_level(&self) -> bool {
        self.three_level
    }

    fn n_variance(&self) -> usize {
        if self.three_level { 2 } else { 1 }
    }
}

/// `ln ∫ Π_i Pr(y_i | η_i + shift + u) φ(u; 0, sd²) du` by adaptive quadrature.
fn log_group_integral(y: &[f64], eta: &[f64], shift: f64, sd: f64, gh: &GaussHermite) -> f64 {
    let loglik = |u: f64| -> f64 {
        y.iter()
            .zip(eta)
            .map(|(&yi, &e)| {
                let z = e + shift + u;
                yi * z - log1p_exp(z)
            })
            .sum()
    };
    let prec = 1.0 / (sd * sd);
    let h = |u: f64| loglik(u) + log_normal_density(u, sd);
    // The integrand is log-concave, so safeguarded Newton finds the mode.
    let mut u = 0.0;
    let mut hu = h(u);
    let mut curv = 0.0;
    for _ in 0..100 {
        let (mut g, mut c) = (-u * prec, -prec);
        for (&yi, &e) in y.iter().zip(eta) {
            let p = logistic(e + shift + u);
            g += yi - p;
            c -= p * (1.0 - p);
        }
        curv = c;
        let mut step = -g / c;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = u + step;
            let hc = h(cand);
            if hc >= hu {
                u = cand;
                hu = hc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-11 * (1.0 + u.abs()) {
            break;
        }
    }
    let scale = 1.0 / (-curv).sqrt();
    gh.log_integral(u, scale, h)
}

/// One-dimensional mode and curvature of a smooth log-integrand evaluated
/// numerically.
fn numeric_mode(f: &impl Fn(f64) -> f64, sd: f64) -> (f64, f64) {
    let d = 1e-4 * sd.max(1e-3);
    let mut u = 0.0;
    let mut fu = f(u);
    let mut curv = -1.0 / (sd * sd);
    for _ in 0..100 {
        let (fp, fm) = (f(u + d), f(u - d));
        let g = (fp - fm) / (2.0 * d);
        let c = (fp - 2.0 * fu + fm) / (d * d);
        if c < 0.0 {
            curv = c;
        }
        let mut step = if c < 0.0 { -g / c } else { g.signum() * sd };
        let mut accepted = false;
        for _ in 0..50 {
            let cand = u + step;
            let fc = f(cand);
            if fc >= fu {
                u = cand;
                fu = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-10 * (sd + u.abs()) {
            break;
        }
    }
    (u, curv)
}

/// Per-top-cluster marginal log-likelihoods at `theta = (β, ln sd_top[, ln sd_mid])`.
pub fn cluster_logliks(data: &NestedData, theta: &[f64], gh: &GaussHermite) -> Vec<f64> {
    let p = data.x.ncols();
    let beta = DVector::from_column_slice(&theta[..p]);
    let eta = &data.x * beta;
    let eta = eta.as_slice();
    let sd_top = theta[p].exp();
    let sd_mid = if data.three_level { theta[p + 1].exp() } else { 0.0 };
    let one = |groups: &Vec<Range<usize>>| -> f64 {
        if !data.three_level {
            let r = groups[0].clone();
            return log_group_integral(&data.y[r.clone()], &eta[r], 0.0, sd_top, gh);
        }
        let f = |u: f64| -> f64 {
            groups
                .iter()
                .map(|r| log_group_integral(&data.y[r.clone()], &eta[r.clone()], u, sd_mid, gh))
                .sum::<f64>()
                + log_normal_density(u, sd_top)
        };
        let (mode, curv) = numeric_mode(&f, sd_top);
        gh.log_integral(mode, 1.0 / (-curv).sqrt(), f)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.clusters.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.clusters.iter().map(one).collect()
    }
}

fn total(v: &[f64]) -> f64 {
    v.iter().sum()
}

fn clamp_theta(theta: &mut [f64], p: usize) {
    for t in &mut theta[p..] {
        *t = t.max(LOG_SD_FLOOR);
    }
}

fn step_size(x: f64) -> f64 {
    1e-3 * x.abs().max(1.0)
}

/// Per-cluster scores by five-point differences; columns are parameters.
fn cluster_scores(data: &NestedData, theta: &[f64], gh: &GaussHermite) -> DMatrix<f64> {
    let k = theta.len();
    let mut scores = DMatrix::zeros(data.n_top(), k);
    for j in 0..k {
        let h = step_size(theta[j]);
        let at = |s: f64| {
            let mut t = theta.to_vec();
            t[j] += s * h;
            cluster_logliks(data, &t, gh)
        };
        let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
        for c in 0..data.n_top() {
            scores[(c, j)] = (m2[c] - 8.0 * m1[c] + 8.0 * p1[c] - p2[c]) / (12.0 * h);
        }
    }
    scores
}

fn numeric_hessian(data: &NestedData, theta: &[f64], f0: f64, gh: &GaussHermite) -> DMatrix<f64> {
    let k = theta.len();
    let f = |steps: &[(usize, f64)]| {
        let mut t = theta.to_vec();
        for &(j, s) in steps {
            t[j] += s;
        }
        total(&cluster_logliks(data, &t, gh))
    };
    let h: Vec<f64> = theta.iter().map(|&t| step_size(t)).collect();
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        hess[(i, i)] = (f(&[(i, h[i])]) - 2.0 * f0 + f(&[(i, -h[i])])) / (h[i] * h[i]);
        for j in 0..i {
            let v = (f(&[(i, h[i]), (j, h[j])]) - f(&[(i, h[i]), (j, -h[j])]) - f(&[(i, -h[i]), (j, h[j])])
                + f(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComponent {
    pub level: String,
    pub variance: f64,
    pub std_error: f64,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedLogitResult {
    pub coefficients: IndexMap<String, f64>,
    pub std_errors: IndexMap<String, f64>,
    /// Covariance of the fixed coefficients.
    #[serde(serialize_with = "serialize_matrix")]
    pub covariance: DMatrix<f64>,
    /// Variance components from the top level down.
    pub variance_components: Vec<VarianceComponent>,
    /// ICC per grouping, aligned with `variance_components`.
    pub icc: Vec<f64>,
    pub loglik: f64,
    pub nodes: usize,
    pub iterations: usize,
    pub max_abs_gradient: f64,
    pub robust: bool,
    pub n_obs: usize,
    pub n_groups: Vec<usize>,
    pub warnings: Vec<String>,
    /// Full parameter vector `(β, ln sd...)` at the optimum.
    pub theta: Vec<f64>,
    /// Regressor means over the estimation sample, for marginal effects.
    pub means: Vec<f64>,
}

impl MixedLogitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.get(name).copied()
    }
}

/// Plain logit by Newton–Raphson. Returns coefficients and their
/// model-based covariance.
pub fn fit_logit(y: &[f64], x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), MixedLogitError> {
    let (n, k) = (x.nrows(), x.ncols());
    let mut beta = DVector::zeros(k);
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        (0..n).map(|i| y[i] * eta[i] - log1p_exp(eta[i])).sum()
    };
    let mut ll = loglik(&beta);
    for _ in 0..200 {
        let eta = x * &beta;
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = logistic(eta[i]);
            let xi = x.row(i).transpose();
            grad += &xi * (y[i] - p);
            info += &xi * xi.transpose() * (p * (1.0 - p));
        }
        if grad.amax() < 1e-10 {
            break;
        }
        let step = info.clone().cholesky().ok_or(MixedLogitError::SingularInformation)?.solve(&grad);
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let lc = loglik(&cand);
            if lc >= ll || t < 1e-10 {
                beta = cand;
                ll = lc;
                break;
            }
            t *= 0.5;
        }
    }
    let eta = x * &beta;
    let mut info = DMatrix::zeros(k, k);
    for i in 0..n {
        let p = logistic(eta[i]);
        let xi = x.row(i).transpose();
        info += &xi * xi.transpose() * (p * (1.0 - p));
    }
    let cov = linalg::inverse_spd(&info).ok_or(MixedLogitError::SingularInformation)?;
    Ok((beta, cov))
}

pub fn fit_mixed_logit(data: &NestedData, options: &MixedLogitOptions) -> Result<MixedLogitResult, MixedLogitError> {
    if options.nodes == 0 {
        return Err(MixedLogitError::InvalidInput("nodes must be at least 1".into()));
    }
    let gh = GaussHermite::new(options.nodes);
    let p = data.x.ncols();
    let k = p + data.n_variance();
    let mut warnings = Vec::new();
    if data.n_mid() == data.n_obs() {
        warnings.push("every lowest-level group holds one observation; the random intercept is confounded with the logistic residual and its variance is inflated or unidentified".into());
    }

    let (beta0, _) = fit_logit(&data.y, &data.x)?;
    let mut theta: Vec<f64> = beta0.iter().copied().collect();
    theta.extend(std::iter::repeat_n(-0.5, data.n_variance()));
    let mut ll = total(&cluster_logliks(data, &theta, &gh));

    let free_gradient = |theta: &[f64], g: &DVector<f64>| -> f64 {
        (0..k)
            .filter(|&j| !(j >= p && theta[j] <= LOG_SD_FLOOR + 1e-12 && g[j] <= 0.0))
            .map(|j| g[j].abs())
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let mut scores = cluster_scores(data, &theta, &gh);
    let mut grad = DVector::from_iterator(k, (0..k).map(|j| scores.column(j).sum()));
    let mut hess = numeric_hessian(data, &theta, ll, &gh);
    let mut max_grad = free_gradient(&theta, &grad);
    while max_grad >= GRADIENT_TOLERANCE {
        if iterations >= options.max_iterations {
            return Err(MixedLogitError::NonConvergence { iterations, gradient: max_grad });
        }
        iterations += 1;
        let neg = -&hess;
        if let Some(ch) = neg.clone().cholesky() {
            // Predicted Newton gain below the resolution of the summed loglik.
            let gain = 0.5 * grad.dot(&ch.solve(&grad));
            if gain < 1e3 * f64::EPSILON * ll.abs().max(1.0) {
                warnings.push(format!(
                    "stopped at numerical precision with max |gradient| {max_grad:.2e}"
                ));
                break;
            }
        }
        let scale = neg.diagonal().iter().map(|d| d.abs()).fold(1e-8, f64::max);
        let mut lambda = 0.0;
        let mut moved = false;
        for _ in 0..40 {
            let damped = &neg + DMatrix::identity(k, k) * lambda;
            if let Some(ch) = damped.cholesky() {
                let step = ch.solve(&grad);
                let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                clamp_theta(&mut cand, p);
                let lc = total(&cluster_logliks(data, &cand, &gh));
                if lc >= ll && cand != theta {
                    theta = cand;
                    ll = lc;
                    moved = true;
                    break;
                }
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
        }
        if !moved {
            log::debug!("no ascent step found; gradient {max_grad:.3e}");
            return Err(MixedLogitError::NonConvergence { iterations, gradient: max_grad });
        }
        scores = cluster_scores(data, &theta, &gh);
        grad = DVector::from_iterator(k, (0..k).map(|j| scores.column(j).sum()));
        hess = numeric_hessian(data, &theta, ll, &gh);
        max_grad = free_gradient(&theta, &grad);
        log::debug!("iteration {iterations}: loglik {ll:.6} max|grad| {max_grad:.3e}");
    }

    let neg = -&hess;
    let bread = linalg::inverse_spd(&neg).unwrap_or_else(|| {
        warnings.push("observed information not positive definite; using pseudo-inverse".into());
        linalg::pseudo_inverse(&neg)
    });
    let mut cov_all = if options.robust {
        let meat = scores.transpose() * &scores;
        let g = data.n_top() as f64;
        &bread * meat * &bread * (g / (g - 1.0).max(1.0))
    } else {
        bread
    };
    linalg::symmetrize(&mut cov_all);

    let mut components = Vec::new();
    let labels = [Some(data.top_label.clone()), data.mid_label.clone()];
    for (idx, label) in labels.iter().take(data.n_variance()).enumerate() {
        let j = p + idx;
        let var = (2.0 * theta[j]).exp();
        let at_boundary = theta[j] <= LOG_SD_FLOOR + 0.5;
        if at_boundary {
            warnings.push(format!("variance of `{}` is at the zero boundary", label.as_deref().unwrap_or("")));
        }
        components.push(VarianceComponent {
            level: label.clone().unwrap_or_default(),
            variance: if at_boundary { 0.0 } else { var },
            std_error: if at_boundary { 0.0 } else { 2.0 * var * cov_all[(j, j)].max(0.0).sqrt() },
            at_boundary,
        });
    }
    let icc_values = icc(&components.iter().map(|c| c.variance).collect::<Vec<_>>());
    let covariance = cov_all.view((0, 0), (p, p)).into_owned();
    let n = data.n_obs() as f64;
    let means = (0..p).map(|j| data.x.column(j).sum() / n).collect();
    let mut n_groups = vec![data.n_top()];
    if data.three_level {
        n_groups.push(data.n_mid());
    }
    Ok(MixedLogitResult {
        coefficients: data.names.iter().cloned().zip(theta[..p].iter().copied()).collect(),
        std_errors: data
            .names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), covariance[(j, j)].max(0.0).sqrt()))
            .collect(),
        covariance,
        variance_components: components,
        icc: icc_values,
        loglik: ll,
        nodes: options.nodes,
        iterations,
        max_abs_gradient: max_grad,
        robust: options.robust,
        n_obs: data.n_obs(),
        n_groups,
        warnings,
        theta,
        means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffectPoint {
    pub value: f64,
    pub effect: f64,
    pub std_error: f64,
}

/// Effect of `variable` on the response probability at each grid point, other
/// regressors held at their means and the random intercepts at zero.
pub fn marginal_effect_curve(
    fit: &MixedLogitResult,
    variable: &str,
    from: f64,
    to: f64,
    step: f64,
) -> Result<Vec<MarginalEffectPoint>, MixedLogitError> {
    let v = fit
        .coefficients
        .get_index_of(variable)
        .ok_or_else(|| MixedLogitError::InvalidInput(format!("unknown regressor `{variable}`")))?;
    if !(step > 0.0) || to < from {
        return Err(MixedLogitError::InvalidInput("grid needs step > 0 and to ≥ from".into()));
    }
    let beta: Vec<f64> = fit.coefficients.values().copied().collect();
    let count = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| {
            let value = from + step * i as f64;
            let mut xbar = fit.means.clone();
            xbar[v] = value;
            let eta: f64 = beta.iter().zip(&xbar).map(|(b, x)| b * x).sum();
            let pr = logistic(eta);
            let dens = pr * (1.0 - pr);
            let effect = beta[v] * dens;
            let grad = DVector::from_iterator(
                beta.len(),
                (0..beta.len()).map(|j| f64::from(j == v) * dens + beta[v] * dens * (1.0 - 2.0 * pr) * xbar[j]),
            );
            let var = (grad.transpose() * &fit.covariance * &grad)[(0, 0)];
            MarginalEffectPoint { value, effect, std_error: var.max(0.0).sqrt() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn hermite_rule_integrates_moments() {
        for n in [1usize, 2, 5, 7, 15, 20] {
            let gh = GaussHermite::new(n);
            let m0: f64 = gh.weights.iter().sum();
            assert_abs_diff_eq!(m0, PI.sqrt(), epsilon = 1e-12);
            if n >= 2 {
                let m2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x * x).sum();
                assert_abs_diff_eq!(m2, PI.sqrt() / 2.0, epsilon = 1e-12);
            }
        }
        let gh = GaussHermite::new(2);
        assert_abs_diff_eq!(gh.nodes[1], 0.5f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn table_five_iccs() {
        for (v, expected) in [(0.1484, 0.0432), (1.6611, 0.3355), (1.2684, 0.2783)] {
            assert_abs_diff_eq!(icc(&[v])[0], expected, epsilon = 5e-5);
        }
        assert_abs_diff_eq!(icc(&[1.6046, 0.2416])[1], 0.3595, epsilon = 5e-5);
        assert_eq!(icc(&[0.0]), vec![0.0]);
    }

    proptest! {
        #[test]
        fn icc_increases_in_each_variance(a in 0.0f64..10.0, b in 0.0f64..10.0, d in 1e-6f64..1.0) {
            let base = icc(&[a, b]);
            prop_assert!(icc(&[a + d, b])[1] > base[1]);
            prop_assert!(icc(&[a, b + d])[1] > base[1]);
            prop_assert!(base.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn group_integral_matches_fine_quadrature() {
        let y = [1.0, 0.0, 1.0, 1.0];
        let eta = [0.2, -0.4, 1.1, 0.0];
        let sd = 0.8;
        // Brute-force trapezoid on a wide grid.
        let f = |u: f64| -> f64 {
            y.iter().zip(&eta).map(|(&yi, &e)| yi * (e + u) - log1p_exp(e + u)).sum::<f64>() + log_normal_density(u, sd)
        };
        let (lo, hi, m) = (-10.0, 10.0, 200_000);
        let h = (hi - lo) / m as f64;
        let brute: f64 = (0..=m).map(|i| {
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            w * f(lo + h * i as f64).exp()
        }).sum::<f64>() * h;
        let aghq = log_group_integral(&y, &eta, 0.0, sd, &GaussHermite::new(15));
        assert_abs_diff_eq!(aghq, brute.ln(), epsilon = 1e-9);
    }

    fn simulate(seed: u64, clusters: usize, per: usize, sigma2: f64, beta: (f64, f64)) -> NestedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = Normal::new(0.0, sigma2.sqrt()).unwrap();
        let n = clusters * per;
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut top = Vec::with_capacity(n);
        for c in 0..clusters {
            let u = if sigma2 > 0.0 { re.sample(&mut rng) } else { 0.0 };
            for _ in 0..per {
                let xi: f64 = rng.random_range(-1.0..1.0);
                let p = logistic(beta.0 + beta.1 * xi + u);
                y.push(f64::from(rng.random::<f64>() < p));
                x.push(xi);
                top.push(c as u32);
            }
        }
        let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        NestedData::new(y, xm, vec!["_cons".into(), "x".into()], &top, None).unwrap()
    }

    #[test]
    fn zero_variance_matches_plain_logit() {
        let data = simulate(5, 60, 30, 0.0, (-0.3, 1.0));
        let fit = fit_mixed_logit(&data, &MixedLogitOptions::default()).unwrap();
        let (beta, cov) = fit_logit(&data.y, &data.x).unwrap();
        assert!(fit.variance_components[0].variance < 0.01);
        for j in 0..2 {
            assert!((fit.theta[j] - beta[j]).abs() < 2.0 * cov[(j, j)].sqrt());
        }
        assert!(fit.max_abs_gradient < GRADIENT_TOLERANCE);
    }

    #[test]
    fn recovers_unit_variance() {
        let data = simulate(7, 100, 60, 1.0, (-0.5, 0.8));
        let fit = fit_mixed_logit(&data, &MixedLogitOptions::default()).unwrap();
        let v = fit.variance_components[0].variance;
        assert!((0.6..1.5).contains(&v), "variance {v}");
        assert!(fit.icc[0] > 0.1);
    }

    #[test]
    fn laplace_and_quadrature_agree_on_slopes() {
        let data = simulate(9, 80, 40, 0.5, (0.0, 1.5));
        let lap = fit_mixed_logit(&data, &MixedLogitOptions { nodes: 1, ..Default::default() }).unwrap();
        let q15 = fit_mixed_logit(&data, &MixedLogitOptions { nodes: 15, ..Default::default() }).unwrap();
        let (a, b) = (lap.coefficient("x").unwrap(), q15.coefficient("x").unwrap());
        assert!((a - b).abs() / b.abs() < 0.02, "{a} vs {b}");
    }

    #[test]
    fn singleton_groups_warn() {
        let data = simulate(1, 300, 1, 0.0, (0.0, 1.0));
        let fit = fit_mixed_logit(&data, &MixedLogitOptions::default()).unwrap();
        assert!(fit.warnings.iter().any(|w| w.contains("one observation")));
    }

    #[test]
    fn three_level_fit_runs_and_orders_iccs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut y, mut x, mut top, mut mid) = (vec![], vec![], vec![], vec![]);
        let n3 = Normal::new(0.0, 1.0).unwrap();
        let n2 = Normal::new(0.0, 0.5).unwrap();
        for c in 0..30u32 {
            let u3 = n3.sample(&mut rng);
            for s in 0..4u32 {
                let u2 = n2.sample(&mut rng);
                for _ in 0..15 {
                    let xi: f64 = rng.random_range(-1.0..1.0);
                    y.push(f64::from(rng.random::<f64>() < logistic(0.3 * xi + u3 + u2)));
                    x.push(xi);
                    top.push(c);
                    mid.push(c * 10 + s);
                }
            }
        }
        let n = y.len();
        let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let data = NestedData::new(y, xm, vec!["_cons".into(), "x".into()], &top, Some(&mid)).unwrap();
        assert_eq!(data.n_top(), 30);
        assert_eq!(data.n_mid(), 120);
        let fit = fit_mixed_logit(&data, &MixedLogitOptions { nodes: 5, ..Default::default() }).unwrap();
        assert_eq!(fit.variance_components.len(), 2);
        assert!(fit.icc[1] >= fit.icc[0]);
        assert!(fit.variance_components[0].variance > 0.3);
    }

    fn fake_fit(beta: Vec<f64>, means: Vec<f64>) -> MixedLogitResult {
        let k = beta.len();
        MixedLogitResult {
            coefficients: ["_cons", "d"].iter().map(|s| s.to_string()).zip(beta.iter().copied()).collect(),
            std_errors: IndexMap::new(),
            covariance: DMatrix::identity(k, k) * 0.01,
            variance_components: vec![],
            icc: vec![],
            loglik: 0.0,
            nodes: 7,
            iterations: 0,
            max_abs_gradient: 0.0,
            robust: false,
            n_obs: 0,
            n_groups: vec![],
            warnings: vec![],
            theta: beta,
            means,
        }
    }

    #[test]
    fn marginal_effect_analytic_forms() {
        let flat = marginal_effect_curve(&fake_fit(vec![0.3, 0.0], vec![1.0, 0.0]), "d", -1.0, 1.0, 0.2).unwrap();
        assert_eq!(flat.len(), 11);
        assert!(flat.iter().all(|p| p.effect == 0.0));
        let fit = fake_fit(vec![0.0, 2.0], vec![1.0, 0.0]);
        let curve = marginal_effect_curve(&fit, "d", -1.0, 1.0, 0.2).unwrap();
        for pt in &curve {
            let p = logistic(2.0 * pt.value);
            assert_abs_diff_eq!(pt.effect, 2.0 * p * (1.0 - p), epsilon = 1e-14);
            // Numeric derivative of Λ(2x) as the oracle.
            let h = 1e-6;
            let num = (logistic(2.0 * (pt.value + h)) - logistic(2.0 * (pt.value - h))) / (2.0 * h);
            assert_abs_diff_eq!(pt.effect, num, epsilon = 1e-8);
        }
        let peak = curve.iter().max_by(|a, b| a.effect.partial_cmp(&b.effect).unwrap()).unwrap();
        assert_abs_diff_eq!(peak.value, 0.0, epsilon = 1e-12);
        // Below p = 0.5 the effect increases along the grid.
        let low = marginal_effect_curve(&fake_fit(vec![-3.0, 1.0], vec![1.0, 0.0]), "d", 0.0, 2.0, 0.2).unwrap();
        assert!(low.windows(2).all(|w| w[1].effect > w[0].effect));
    }
}
