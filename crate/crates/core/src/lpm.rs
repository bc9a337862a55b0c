//! Linear probability models with absorbed fixed effects.
//!
//! Fixed effects are removed by alternating projections (repeated
//! within-group demeaning across factors), OLS runs on the residualized data
//! and the covariance is cluster-robust.

use std::collections::HashMap;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::linalg;

pub const DEFAULT_DEMEAN_TOL: f64 = 1e-8;
pub const DEFAULT_DEMEAN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum LpmError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("fixed-effect spec: {0}")]
    InvalidSpec(String),
    #[error("demeaning did not converge: column `{column}` still moved by {change:.3e}")]
    NonConvergence { column: String, change: f64 },
    #[error("collinear regressors: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("dependent variable is constant ({0}) in the estimation sample")]
    DegenerateDependent(f64),
    #[error("estimation sample is empty")]
    EmptySample,
    #[error("no fitted probability lies in [0, 1]")]
    EmptySubsample,
}

/// One absorbed fixed-effect dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorDim {
    Time,
    Origin,
    Destination,
    Sector,
    Pair,
    OriginTime,
    DestinationTime,
    SectorTime,
}

impl FactorDim {
    /// Frame columns whose cross defines the factor.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            FactorDim::Time => &["year"],
            FactorDim::Origin => &["origin"],
            FactorDim::Destination => &["destination"],
            FactorDim::Sector => &["sector"],
            FactorDim::Pair => &["origin", "destination"],
            FactorDim::OriginTime => &["origin", "year"],
            FactorDim::DestinationTime => &["destination", "year"],
            FactorDim::SectorTime => &["sector", "year"],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FactorDim::Time => "time",
            FactorDim::Origin => "origin",
            FactorDim::Destination => "destination",
            FactorDim::Sector => "sector",
            FactorDim::Pair => "pair",
            FactorDim::OriginTime => "origin_time",
            FactorDim::DestinationTime => "destination_time",
            FactorDim::SectorTime => "sector_time",
        }
    }
}

/// Ordered set of absorbed factors. An empty spec fits a plain intercept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedEffectSpec {
    factors: Vec<FactorDim>,
}

impl FixedEffectSpec {
    pub fn new(factors: Vec<FactorDim>) -> Result<Self, LpmError> {
        let mut seen = Vec::new();
        for f in &factors {
            if seen.contains(f) {
                return Err(LpmError::InvalidSpec(format!("duplicate factor `{}`", f.label())));
            }
            seen.push(*f);
        }
        Ok(Self { factors })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn factors(&self) -> &[FactorDim] {
        &self.factors
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Baseline and the five fixed-effect structures of the migration
    /// specifications, in order: time; time+origin+destination+sector;
    /// time+pair+sector; origin-time+destination+sector;
    /// destination-time+origin+sector; origin-time+destination+sector-time;
    /// destination-time+origin+sector-time.
    pub fn ladder() -> Vec<FixedEffectSpec> {
        use FactorDim::*;
        [
            vec![Time],
            vec![Time, Origin, Destination, Sector],
            vec![Time, Pair, Sector],
            vec![OriginTime, Destination, Sector],
            vec![DestinationTime, Origin, Sector],
            vec![OriginTime, Destination, SectorTime],
            vec![DestinationTime, Origin, SectorTime],
        ]
        .into_iter()
        .map(|f| FixedEffectSpec { factors: f })
        .collect()
    }
}

/// Row grouping used for clustering: a factor dimension or any frame column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterDim {
    Factor(FactorDim),
    Column(String),
}

impl Default for ClusterDim {
    fn default() -> Self {
        ClusterDim::Factor(FactorDim::Destination)
    }
}

impl ClusterDim {
    pub fn label(&self) -> String {
        match self {
            ClusterDim::Factor(f) => f.label().to_string(),
            ClusterDim::Column(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    /// No small-sample factor.
    Cr0,
    /// `G/(G−1) · (N−1)/(N−K)`.
    #[default]
    Cr1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpmSpec {
    #[serde(default = "default_dv")]
    pub dv: String,
    pub regressors: Vec<String>,
    #[serde(default)]
    pub factors: FixedEffectSpec,
    #[serde(default)]
    pub cluster: ClusterDim,
    #[serde(default)]
    pub covariance: CovarianceKind,
    #[serde(default = "default_tol")]
    pub demean_tol: f64,
    #[serde(default = "default_max_iter")]
    pub demean_max_iter: usize,
}

fn default_dv() -> String {
    "migrate".into()
}
fn default_tol() -> f64 {
    DEFAULT_DEMEAN_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_DEMEAN_MAX_ITER
}

impl LpmSpec {
    pub fn new(dv: &str, regressors: &[&str], factors: FixedEffectSpec, cluster: ClusterDim) -> Self {
        Self {
            dv: dv.into(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            factors,
            cluster,
            covariance: CovarianceKind::Cr1,
            demean_tol: DEFAULT_DEMEAN_TOL,
            demean_max_iter: DEFAULT_DEMEAN_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub n_below_0: usize,
    pub n_above_1: usize,
    pub n_in_range: usize,
    pub share_below_0: f64,
    pub share_above_1: f64,
    /// Share of rows with DV = 1 among the out-of-range rows; `None` when no
    /// row is out of range.
    pub migrant_share_among_out_of_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationResult {
    pub coefficients: IndexMap<String, f64>,
    pub std_errors: IndexMap<String, f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    pub cluster: String,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub r_squared: f64,
    pub within_r_squared: f64,
    pub fe_iterations: usize,
    pub absorbed: Vec<String>,
    pub singleton_rows: usize,
    pub warnings: Vec<String>,
    pub prediction_report: Option<PredictionReport>,
}

pub(crate) fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl EstimationResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.get(name).copied()
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.std_errors.get(name).copied()
    }

    /// Two-sided normal-approximation interval.
    pub fn confidence_interval(&self, name: &str, level: f64) -> Option<(f64, f64)> {
        let z = statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::Normal::standard(),
            0.5 + level / 2.0,
        );
        let (b, se) = (self.coefficient(name)?, self.std_error(name)?);
        Some((b - z * se, b + z * se))
    }
}

/// A fit together with what a refit needs.
#[derive(Debug, Clone)]
pub struct LpmFit {
    pub result: EstimationResult,
    pub spec: LpmSpec,
    /// Frame rows that entered the estimation sample.
    pub rows: Vec<usize>,
    pub y: Vec<f64>,
    /// Fitted values including the absorbed effects.
    pub fitted: Vec<f64>,
}

/// Product of two columns appended as `a_X_b`; returns the new name.
pub fn interaction(frame: &mut Frame, a: &str, b: &str) -> Result<String, FrameError> {
    let xa = frame.values(a)?;
    let xb = frame.values(b)?;
    let name = format!("{a}_X_{b}");
    frame.push_numeric(name.clone(), xa.iter().zip(&xb).map(|(p, q)| p * q).collect());
    Ok(name)
}

/// Dense group index per row for one factor; rows with a missing key get
/// `None`.
pub fn factor_groups(frame: &Frame, factor: FactorDim) -> Result<Vec<Option<u32>>, FrameError> {
    let cols = factor
        .columns()
        .iter()
        .map(|c| frame.codes(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(densify((0..frame.n_rows()).map(|i| {
        cols.iter().map(|c| c[i]).collect::<Option<Vec<i64>>>()
    })))
}

fn densify<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = Option<K>>) -> Vec<Option<u32>> {
    let mut map: HashMap<K, u32> = HashMap::new();
    keys.map(|k| {
        k.map(|k| {
            let next = map.len() as u32;
            *map.entry(k).or_insert(next)
        })
    })
    .collect()
}

fn cluster_groups(frame: &Frame, cluster: &ClusterDim) -> Result<Vec<Option<u32>>, FrameError> {
    match cluster {
        ClusterDim::Factor(f) => factor_groups(frame, *f),
        ClusterDim::Column(c) => Ok(densify(frame.codes(c)?.into_iter())),
    }
}

/// Group structure of one factor over the estimation sample.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub ids: Vec<u32>,
    pub n_groups: usize,
    counts: Vec<f64>,
}

impl Grouping {
    pub fn new(raw: &[u32]) -> Self {
        let remap = densify(raw.iter().map(|&g| Some(g)));
        let ids: Vec<u32> = remap.into_iter().map(|g| g.expect("present")).collect();
        let n_groups = ids.iter().map(|&g| g as usize + 1).max().unwrap_or(0);
        let mut counts = vec![0.0; n_groups];
        for &g in &ids {
            counts[g as usize] += 1.0;
        }
        Self { ids, n_groups, counts }
    }

    pub fn singleton_rows(&self) -> usize {
        self.ids.iter().filter(|&&g| self.counts[g as usize] == 1.0).count()
    }

    /// Subtracts group means in place; returns the largest mean removed.
    fn sweep(&self, column: &mut [f64], sums: &mut Vec<f64>) -> f64 {
        sums.clear();
        sums.resize(self.n_groups, 0.0);
        for (&g, &v) in self.ids.iter().zip(column.iter()) {
            sums[g as usize] += v;
        }
        for (s, &c) in sums.iter_mut().zip(&self.counts) {
            *s /= c;
        }
        for (&g, v) in self.ids.iter().zip(column.iter_mut()) {
            *v -= sums[g as usize];
        }
        sums.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Residualizes one column against all groupings by alternating projections.
/// Returns the number of sweeps used.
pub fn demean_column(
    column: &mut [f64],
    groupings: &[Grouping],
    tol: f64,
    max_iter: usize,
) -> Result<usize, f64> {
    let mut sums = Vec::new();
    for iter in 1..=max_iter {
        let mut change: f64 = 0.0;
        for g in groupings {
            change = change.max(g.sweep(column, &mut sums));
        }
        if groupings.len() <= 1 || change < tol {
            return Ok(iter);
        }
        if iter == max_iter {
            return Err(change);
        }
    }
    Ok(0)
}

/// Residualizes every column; the returned count is the largest number of
/// sweeps any column needed.
pub fn demean(
    columns: &mut [(String, Vec<f64>)],
    groupings: &[Grouping],
    tol: f64,
    max_iter: usize,
) -> Result<usize, LpmError> {
    let run = |(name, col): &mut (String, Vec<f64>)| {
        demean_column(col, groupings, tol, max_iter)
            .map_err(|change| LpmError::NonConvergence { column: name.clone(), change })
    };
    #[cfg(feature = "parallel")]
    let sweeps: Vec<Result<usize, LpmError>> = {
        use rayon::prelude::*;
        columns.par_iter_mut().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let sweeps: Vec<Result<usize, LpmError>> = columns.iter_mut().map(run).collect();
    sweeps.into_iter().try_fold(0, |m, s| s.map(|s| m.max(s)))
}

struct Design {
    rows: Vec<usize>,
    y: Vec<f64>,
    x: Vec<(String, Vec<f64>)>,
    groupings: Vec<Grouping>,
    clusters: Vec<u32>,
}

fn build_design(frame: &Frame, spec: &LpmSpec) -> Result<Design, LpmError> {
    let y_all = frame.values(&spec.dv)?;
    let x_all = spec
        .regressors
        .iter()
        .map(|r| frame.values(r).map(|v| (r.clone(), v)))
        .collect::<Result<Vec<_>, _>>()?;
    let factor_all = spec
        .factors
        .factors()
        .iter()
        .map(|&f| factor_groups(frame, f))
        .collect::<Result<Vec<_>, _>>()?;
    let cluster_all = cluster_groups(frame, &spec.cluster)?;
    let rows: Vec<usize> = (0..frame.n_rows())
        .filter(|&i| {
            y_all[i].is_finite()
                && x_all.iter().all(|(_, v)| v[i].is_finite())
                && factor_all.iter().all(|f| f[i].is_some())
                && cluster_all[i].is_some()
        })
        .collect();
    if rows.is_empty() {
        return Err(LpmError::EmptySample);
    }
    let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let y = pick(&y_all);
    let mut x: Vec<(String, Vec<f64>)> = x_all.iter().map(|(n, v)| (n.clone(), pick(v))).collect();
    if spec.factors.is_empty() {
        x.insert(0, ("_cons".into(), vec![1.0; rows.len()]));
    }
    let groupings = factor_all
        .iter()
        .map(|f| Grouping::new(&rows.iter().map(|&i| f[i].expect("filtered")).collect::<Vec<_>>()))
        .collect();
    let clusters = Grouping::new(&rows.iter().map(|&i| cluster_all[i].expect("filtered")).collect::<Vec<_>>()).ids;
    Ok(Design { rows, y, x, groupings, clusters })
}

pub fn fit_lpm(frame: &Frame, spec: &LpmSpec) -> Result<LpmFit, LpmError> {
    let design = build_design(frame, spec)?;
    fit_design(design, spec)
}

fn fit_design(design: Design, spec: &LpmSpec) -> Result<LpmFit, LpmError> {
    let Design { rows, y, x, groupings, clusters } = design;
    let n = y.len();
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(LpmError::DegenerateDependent(first));
    }
    let mut warnings = Vec::new();

    let mut columns: Vec<(String, Vec<f64>)> = Vec::with_capacity(x.len() + 1);
    columns.push((spec.dv.clone(), y.clone()));
    columns.extend(x.iter().cloned());
    let fe_iterations = if groupings.is_empty() {
        0
    } else {
        demean(&mut columns, &groupings, spec.demean_tol, spec.demean_max_iter)?
    };
    let singleton_rows = groupings.iter().map(Grouping::singleton_rows).max().unwrap_or(0);
    if singleton_rows > 0 {
        warnings.push(format!("{singleton_rows} rows sit in singleton fixed-effect groups"));
    }

    let names: Vec<String> = x.iter().map(|(n, _)| n.clone()).collect();
    let k = names.len();
    let yt = DVector::from_vec(columns[0].1.clone());
    let xt = DMatrix::from_fn(n, k, |i, j| columns[j + 1].1[i]);
    let xtx = xt.transpose() * &xt;
    let collinear = linalg::collinear_columns(&xtx, 1e-10);
    if !collinear.is_empty() {
        return Err(LpmError::RankDeficient(collinear.into_iter().map(|j| names[j].clone()).collect()));
    }
    let bread = linalg::inverse_spd(&xtx).ok_or_else(|| LpmError::RankDeficient(names.clone()))?;
    let beta = &bread * (xt.transpose() * &yt);
    let resid = &yt - &xt * &beta;

    let n_clusters = clusters.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut scores = DMatrix::<f64>::zeros(n_clusters, k);
    for i in 0..n {
        let c = clusters[i] as usize;
        for j in 0..k {
            scores[(c, j)] += xt[(i, j)] * resid[i];
        }
    }
    let meat = scores.transpose() * &scores;
    let mut covariance = &bread * meat * &bread;
    let mut sizes = vec![0usize; n_clusters];
    for &c in &clusters {
        sizes[c as usize] += 1;
    }
    if sizes.iter().any(|&s| s == 1) && n_clusters < n {
        warnings.push(format!(
            "{} singleton clusters",
            sizes.iter().filter(|&&s| s == 1).count()
        ));
    }
    if n_clusters < 2 {
        warnings.push("fewer than two clusters; covariance is not identified".into());
    }
    // Absorbed constant counts as a parameter when fixed effects are present.
    let n_params = if groupings.is_empty() { k } else { k + 1 };
    if spec.covariance == CovarianceKind::Cr1 && n_clusters > 1 && n > n_params {
        let g = n_clusters as f64;
        let factor = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - n_params as f64);
        covariance *= factor;
    }
    linalg::symmetrize(&mut covariance);

    let ssr = resid.norm_squared();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let r_squared = 1.0 - ssr / tss;
    let within_r_squared = if groupings.is_empty() { r_squared } else { 1.0 - ssr / yt.norm_squared() };
    let fitted: Vec<f64> = y.iter().zip(resid.iter()).map(|(a, e)| a - e).collect();

    let coefficients: IndexMap<String, f64> = names.iter().cloned().zip(beta.iter().copied()).collect();
    let std_errors = names
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), covariance[(j, j)].max(0.0).sqrt()))
        .collect();
    let result = EstimationResult {
        coefficients,
        std_errors,
        covariance,
        covariance_kind: spec.covariance,
        cluster: spec.cluster.label(),
        n_clusters,
        n_obs: n,
        r_squared,
        within_r_squared,
        fe_iterations,
        absorbed: spec.factors.factors().iter().map(|f| f.label().to_string()).collect(),
        singleton_rows,
        warnings,
        prediction_report: None,
    };
    Ok(LpmFit { result, spec: spec.clone(), rows, y, fitted })
}

/// Out-of-range accounting of the fitted probabilities.
pub fn prediction_report(fitted: &[f64], y: &[f64]) -> PredictionReport {
    let n = fitted.len();
    let below = fitted.iter().filter(|&&p| p < 0.0).count();
    let above = fitted.iter().filter(|&&p| p > 1.0).count();
    let out: Vec<f64> = fitted
        .iter()
        .zip(y)
        .filter(|(p, _)| **p < 0.0 || **p > 1.0)
        .map(|(_, &v)| v)
        .collect();
    PredictionReport {
        n_below_0: below,
        n_above_1: above,
        n_in_range: n - below - above,
        share_below_0: below as f64 / n as f64,
        share_above_1: above as f64 / n as f64,
        migrant_share_among_out_of_range: if out.is_empty() {
            None
        } else {
            Some(out.iter().filter(|&&v| v == 1.0).count() as f64 / out.len() as f64)
        },
    }
}

/// Reports out-of-range fitted probabilities of `fit` and refits on the rows
/// whose fitted probability lies in `[0, 1]`.
pub fn unit_interval_refit(fit: &LpmFit, frame: &Frame) -> Result<(LpmFit, PredictionReport), LpmError> {
    let report = prediction_report(&fit.fitted, &fit.y);
    let mut keep = vec![false; frame.n_rows()];
    for (&row, &p) in fit.rows.iter().zip(&fit.fitted) {
        if (0.0..=1.0).contains(&p) {
            keep[row] = true;
        }
    }
    if report.n_in_range == 0 {
        return Err(LpmError::EmptySubsample);
    }
    let mut refit = if report.n_in_range == fit.rows.len() {
        fit.clone()
    } else {
        let sub = frame.filter(&keep);
        let mut refit = fit_lpm(&sub, &fit.spec)?;
        // Map subsample rows back to the caller's frame.
        let kept_rows: Vec<usize> = (0..frame.n_rows()).filter(|&i| keep[i]).collect();
        refit.rows = refit.rows.iter().map(|&i| kept_rows[i]).collect();
        refit
    };
    refit.result.prediction_report = Some(report.clone());
    Ok((refit, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_with(y: Vec<f64>, x: Vec<f64>, year: Vec<i64>, dest: Vec<i64>) -> Frame {
        let mut f = Frame::new(y.len());
        f.push_numeric("migrate", y);
        f.push_numeric("x", x);
        f.push_categorical("year", year);
        f.push_categorical("destination", dest);
        f.push_categorical("origin", vec![1; f.n_rows()]);
        f
    }

    #[test]
    fn single_group_demeaning() {
        let g = Grouping::new(&[0, 0, 0]);
        let mut col = vec![1.0, 2.0, 3.0];
        demean_column(&mut col, &[g], 1e-12, 10).unwrap();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn within_constant_column_vanishes() {
        let a = Grouping::new(&[0, 0, 1, 1, 2]);
        let b = Grouping::new(&[0, 1, 0, 1, 1]);
        let mut col = vec![4.0, 4.0, -1.0, -1.0, 7.0];
        demean_column(&mut col, &[a, b], 1e-12, 1000).unwrap();
        assert!(col.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_point_line() {
        let f = frame_with(vec![0.0, 1.0], vec![0.0, 1.0], vec![1, 1], vec![1, 2]);
        let spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::none(), ClusterDim::default());
        let fit = fit_lpm(&f, &spec).unwrap();
        assert_abs_diff_eq!(fit.result.coefficient("x").unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.result.coefficient("_cons").unwrap(), 0.0, epsilon = 1e-12);
    }

    /// HC0 sandwich computed directly: (X'X)^-1 X' diag(e²) X (X'X)^-1.
    fn hc0(x: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
        let b = &xtx_inv * x.transpose() * y;
        let e = y - x * b;
        let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            meat += &xi * xi.transpose() * e[i] * e[i];
        }
        &xtx_inv * meat * &xtx_inv
    }

    #[test]
    fn singleton_clusters_give_hc0() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.random::<f64>() < 0.2 + 0.5 * v)).collect();
        let mut f = frame_with(y.clone(), x.clone(), vec![1; n], vec![1; n]);
        f.push_categorical("person_id", (0..n as i64).collect());
        let mut spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::none(), ClusterDim::Column("person_id".into()));
        spec.covariance = CovarianceKind::Cr0;
        let fit = fit_lpm(&f, &spec).unwrap();
        let xm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let oracle = hc0(&xm, &DVector::from_vec(y));
        assert!((&fit.result.covariance - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_dv_is_an_error() {
        let f = frame_with(vec![0.0; 4], vec![0.0, 1.0, 2.0, 3.0], vec![1; 4], vec![1, 1, 2, 2]);
        let spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::none(), ClusterDim::default());
        assert!(matches!(fit_lpm(&f, &spec), Err(LpmError::DegenerateDependent(_))));
    }

    #[test]
    fn absorbed_regressor_is_rank_deficient() {
        let f = frame_with(
            vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            vec![5.0, 5.0, 6.0, 6.0, 7.0, 7.0],
            vec![1, 1, 2, 2, 3, 3],
            vec![1, 2, 1, 2, 1, 2],
        );
        let spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::new(vec![FactorDim::Time]).unwrap(), ClusterDim::default());
        match fit_lpm(&f, &spec) {
            Err(LpmError::RankDeficient(cols)) => assert_eq!(cols, vec!["x".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_factor_rejected() {
        assert!(FixedEffectSpec::new(vec![FactorDim::Time, FactorDim::Time]).is_err());
        assert_eq!(FixedEffectSpec::ladder().len(), 7);
    }

    #[test]
    fn interaction_columns() {
        let mut f = frame_with(vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1; 3], vec![1; 3]);
        f.push_numeric("zero", vec![0.0; 3]);
        let name = interaction(&mut f, "zero", "x").unwrap();
        assert_eq!(name, "zero_X_x");
        assert!(f.numeric(&name).unwrap().iter().all(|&v| v == 0.0));
        let name = interaction(&mut f, "x", "x").unwrap();
        assert_eq!(f.numeric(&name).unwrap(), f.numeric("x").unwrap());
        f.push_numeric("r", vec![0.3, -2.0, 4.5]);
        let name = interaction(&mut f, "r", "x").unwrap();
        assert_eq!(f.numeric(&name).unwrap(), &[0.3, -0.0, 4.5]);
    }

    #[test]
    fn all_in_range_refit_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.random::<f64>() < 0.3 + 0.4 * v)).collect();
        let f = frame_with(y, x, (0..n as i64).map(|i| i % 5).collect(), (0..n as i64).map(|i| i % 7).collect());
        let spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::new(vec![FactorDim::Time]).unwrap(), ClusterDim::default());
        let fit = fit_lpm(&f, &spec).unwrap();
        let (refit, report) = unit_interval_refit(&fit, &f).unwrap();
        assert_eq!(report.n_in_range, n);
        assert_eq!(report.migrant_share_among_out_of_range, None);
        assert_abs_diff_eq!(refit.result.coefficient("x").unwrap(), fit.result.coefficient("x").unwrap(), epsilon = 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cr1_dominates_cr0(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 120;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.random::<f64>() < 0.2 + 0.6 * v)).collect();
            let dest: Vec<i64> = (0..n).map(|_| rng.random_range(0..12)).collect();
            let f = frame_with(y, x, (0..n as i64).map(|i| i % 4).collect(), dest);
            let mut spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::new(vec![FactorDim::Time]).unwrap(), ClusterDim::default());
            let cr1 = fit_lpm(&f, &spec);
            prop_assume!(cr1.is_ok());
            let cr1 = cr1.unwrap();
            spec.covariance = CovarianceKind::Cr0;
            let cr0 = fit_lpm(&f, &spec).unwrap();
            prop_assert!(cr1.result.std_error("x").unwrap() >= cr0.result.std_error("x").unwrap());
            prop_assert!(linalg::min_eigenvalue(&cr1.result.covariance) >= -1e-8);
        }

        #[test]
        fn invariant_to_cluster_relabeling_and_within_cluster_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 90;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.random::<f64>() < 0.2 + 0.6 * v)).collect();
            let dest: Vec<i64> = (0..n).map(|i| (i % 9) as i64).collect();
            let year: Vec<i64> = (0..n).map(|i| (i % 4) as i64).collect();
            let spec = LpmSpec::new("migrate", &["x"], FixedEffectSpec::new(vec![FactorDim::Time]).unwrap(), ClusterDim::default());
            let base = fit_lpm(&frame_with(y.clone(), x.clone(), year.clone(), dest.clone()), &spec);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let relabeled: Vec<i64> = dest.iter().map(|d| 100 - 7 * d).collect();
            let other = fit_lpm(&frame_with(y.clone(), x.clone(), year.clone(), relabeled), &spec).unwrap();
            prop_assert!((&base.result.covariance - &other.result.covariance).abs().max() < 1e-14);
            // Reverse the row order within every cluster: sort by (dest, reversed index).
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (dest[i], std::cmp::Reverse(i)));
            let perm = |v: &Vec<f64>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let permi = |v: &Vec<i64>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let shuffled = fit_lpm(&frame_with(perm(&y), perm(&x), permi(&year), permi(&dest)), &spec).unwrap();
            prop_assert!((base.result.coefficient("x").unwrap() - shuffled.result.coefficient("x").unwrap()).abs() < 1e-12);
        }

        #[test]
        fn shifting_an_absorbed_regressor(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 80;
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.random::<f64>() < 0.2 + 0.6 * v)).collect();
            let year: Vec<i64> = (0..n).map(|i| (i % 5) as i64).collect();
            let mut f = frame_with(y, x, year.clone(), (0..n as i64).map(|i| i % 6).collect());
            let fe = FixedEffectSpec::new(vec![FactorDim::Time]).unwrap();
            let spec = LpmSpec::new("migrate", &["x"], fe, ClusterDim::default());
            let base = fit_lpm(&f, &spec);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            // Shifting x by a year-specific constant is spanned by the time effects.
            let xs: Vec<f64> = f.numeric("x").unwrap().iter().zip(&year).map(|(v, &t)| v + shift * t as f64).collect();
            f.push_numeric("x", xs);
            let shifted = fit_lpm(&f, &spec).unwrap();
            prop_assert!((base.result.coefficient("x").unwrap() - shifted.result.coefficient("x").unwrap()).abs() < 1e-8);
        }
    }
}
