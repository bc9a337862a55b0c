//! Two-step system GMM for static panels.
//!
//! Differenced equations are instrumented with lagged levels, level equations
//! with lagged differences. The two-step covariance carries the Windmeijer
//! finite-sample correction; Hansen, difference-in-Hansen and Arellano–Bond
//! serial-correlation tests are computed from the same moment blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::linalg;
use crate::lpm::serialize_matrix;
use crate::stats::{chi2_sf, normal_two_sided_p};

pub const HANSEN_ADVISORY: &str =
    "Hansen p-values well above 0.25 are conventionally read as comfortable; very high values can signal instrument proliferation.";

#[derive(Debug, Error)]
pub enum GmmError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("panel has {periods} periods; at least {needed} are required")]
    InsufficientTimePeriods { periods: usize, needed: usize },
    #[error("AR({order}) needs more periods than the panel provides")]
    InsufficientPeriods { order: usize },
    #[error("{params} parameters but only {instruments} instruments")]
    Underidentified { params: usize, instruments: usize },
    #[error("regressors are collinear given the instruments")]
    RankDeficient,
    #[error("instrument subset `{0}` not found")]
    SubsetNotFound(String),
    #[error("degenerate statistic: {0}")]
    Degenerate(String),
}

/// Lag window `(min, max)` for GMM-style instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange(pub usize, pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub dv: String,
    #[serde(default)]
    pub endogenous: Vec<String>,
    #[serde(default)]
    pub predetermined: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    #[serde(default = "default_endo_lags")]
    pub endogenous_lags: LagRange,
    #[serde(default = "default_pre_lags")]
    pub predetermined_lags: LagRange,
    #[serde(default)]
    pub collapse: bool,
    /// Lagged-difference instruments for the level equation.
    #[serde(default = "yes")]
    pub level_instruments: bool,
    #[serde(default = "yes")]
    pub time_effects: bool,
    #[serde(default)]
    pub sector_effects: bool,
    #[serde(default = "default_unit")]
    pub unit: String,
    #[serde(default = "default_time")]
    pub time: String,
}

fn default_endo_lags() -> LagRange {
    LagRange(2, 3)
}
fn default_pre_lags() -> LagRange {
    LagRange(1, 2)
}
fn yes() -> bool {
    true
}
fn default_unit() -> String {
    "unit".into()
}
fn default_time() -> String {
    "year".into()
}

impl GmmSpec {
    pub fn new(dv: &str, unit: &str, time: &str) -> Self {
        Self {
            dv: dv.into(),
            endogenous: vec![],
            predetermined: vec![],
            exogenous: vec![],
            endogenous_lags: default_endo_lags(),
            predetermined_lags: default_pre_lags(),
            collapse: false,
            level_instruments: true,
            time_effects: true,
            sector_effects: false,
            unit: unit.into(),
            time: time.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        let LagRange(a, b) = self.endogenous_lags;
        if a < 2 || b < a {
            return Err(GmmError::InvalidSpec(format!("endogenous lags ({a}, {b}) need 2 ≤ min ≤ max")));
        }
        let LagRange(a, b) = self.predetermined_lags;
        if a < 1 || b < a {
            return Err(GmmError::InvalidSpec(format!("predetermined lags ({a}, {b}) need 1 ≤ min ≤ max")));
        }
        let mut seen = BTreeSet::new();
        for name in self.regressors() {
            if !seen.insert(name) {
                return Err(GmmError::InvalidSpec(format!("`{name}` appears in more than one role")));
            }
        }
        if seen.is_empty() {
            return Err(GmmError::InvalidSpec("no regressors".into()));
        }
        Ok(())
    }

    fn regressors(&self) -> impl Iterator<Item = &String> {
        self.endogenous.iter().chain(&self.predetermined).chain(&self.exogenous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Equation {
    Diff,
    Level,
}

#[derive(Debug, Clone)]
enum Source {
    /// Level of a variable `lag` periods back, on difference rows.
    LagLevel { var: usize, lag: usize, period: Option<i64> },
    /// Difference of a variable `lag` periods back, on level rows.
    LagDiff { var: usize, lag: usize, period: Option<i64> },
    /// The regressor itself (differenced on difference rows).
    Own { col: usize, eq: Equation },
}

#[derive(Debug, Clone)]
struct InstrumentColumn {
    block: String,
    source: Source,
}

#[derive(Debug, Clone)]
struct UnitBlock {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    h: DMatrix<f64>,
    /// Period of each difference row; `None` on level rows.
    diff_period: Vec<Option<i64>>,
}

/// Assembled system: per-unit stacked rows and the instrument layout.
#[derive(Debug, Clone)]
pub struct SystemGmm {
    units: Vec<UnitBlock>,
    names: Vec<String>,
    columns: Vec<InstrumentColumn>,
    periods: Vec<i64>,
    n_diff_rows: usize,
    n_level_rows: usize,
}

struct VarStore {
    /// [var][unit][period index]
    values: Vec<Vec<Vec<Option<f64>>>>,
    t0: i64,
}

impl VarStore {
    fn get(&self, var: usize, unit: usize, t: i64) -> Option<f64> {
        let idx = t - self.t0;
        if idx < 0 {
            return None;
        }
        self.values[var][unit].get(idx as usize).copied().flatten()
    }

    fn diff(&self, var: usize, unit: usize, t: i64) -> Option<f64> {
        Some(self.get(var, unit, t)? - self.get(var, unit, t - 1)?)
    }
}

impl SystemGmm {
    pub fn from_frame(frame: &Frame, spec: &GmmSpec) -> Result<Self, GmmError> {
        spec.validate()?;
        let unit_codes = frame.codes(&spec.unit)?;
        let time_codes = frame.codes(&spec.time)?;
        let sector_codes = if spec.sector_effects { Some(frame.codes("sector")?) } else { None };
        let reg_names: Vec<String> = spec.regressors().cloned().collect();
        let mut data_cols = vec![frame.values(&spec.dv)?];
        for r in &reg_names {
            data_cols.push(frame.values(r)?);
        }

        let rows: Vec<usize> = (0..frame.n_rows())
            .filter(|&i| {
                unit_codes[i].is_some()
                    && time_codes[i].is_some()
                    && sector_codes.as_ref().is_none_or(|s| s[i].is_some())
                    && data_cols.iter().all(|c| c[i].is_finite())
            })
            .collect();
        let periods: Vec<i64> = rows.iter().map(|&i| time_codes[i].expect("filtered")).collect::<BTreeSet<_>>().into_iter().collect();
        if periods.len() < 3 {
            return Err(GmmError::InsufficientTimePeriods { periods: periods.len(), needed: 3 });
        }
        let (t0, t_last) = (periods[0], *periods.last().expect("nonempty"));
        let span = (t_last - t0 + 1) as usize;
        let unit_ids: Vec<i64> = rows.iter().map(|&i| unit_codes[i].expect("filtered")).collect::<BTreeSet<_>>().into_iter().collect();
        let unit_index: HashMap<i64, usize> = unit_ids.iter().enumerate().map(|(k, &u)| (u, k)).collect();

        // Regressor layout: named regressors, constant, time and sector dummies.
        let mut names = reg_names.clone();
        names.push("_cons".into());
        let time_dummies: Vec<i64> = if spec.time_effects { periods[1..].to_vec() } else { vec![] };
        names.extend(time_dummies.iter().map(|t| format!("{}_{t}", spec.time)));
        let sector_levels: Vec<i64> = match &sector_codes {
            Some(s) => rows.iter().map(|&i| s[i].expect("filtered")).collect::<BTreeSet<_>>().into_iter().skip(1).collect(),
            None => vec![],
        };
        names.extend(sector_levels.iter().map(|s| format!("sector_{s}")));
        let k = names.len();
        let n_named = reg_names.len();

        let mut store = VarStore { values: vec![vec![vec![None; span]; unit_ids.len()]; data_cols.len()], t0 };
        let mut unit_sector: Vec<Vec<Option<i64>>> = vec![vec![None; span]; unit_ids.len()];
        for &i in &rows {
            let u = unit_index[&unit_codes[i].expect("filtered")];
            let t = (time_codes[i].expect("filtered") - t0) as usize;
            if store.values[0][u][t].is_some() {
                return Err(GmmError::InvalidSpec(format!("duplicate (unit, time) row at frame row {i}")));
            }
            for (v, col) in data_cols.iter().enumerate() {
                store.values[v][u][t] = Some(col[i]);
            }
            if let Some(s) = &sector_codes {
                unit_sector[u][t] = s[i];
            }
        }

        let full_row = |u: usize, t: i64| -> Option<Vec<f64>> {
            let mut row = Vec::with_capacity(k);
            for v in 1..=n_named {
                row.push(store.get(v, u, t)?);
            }
            row.push(1.0);
            row.extend(time_dummies.iter().map(|&d| f64::from(d == t)));
            let sec = unit_sector[u].get((t - t0) as usize).copied().flatten();
            row.extend(sector_levels.iter().map(|&s| f64::from(sec == Some(s))));
            Some(row)
        };

        // Instrument layout.
        let mut columns = Vec::new();
        let diff_periods = &periods[1..];
        let gmm_roles = spec
            .endogenous
            .iter()
            .map(|n| (n, spec.endogenous_lags))
            .chain(spec.predetermined.iter().map(|n| (n, spec.predetermined_lags)));
        for (name, LagRange(a, b)) in gmm_roles {
            let var = 1 + reg_names.iter().position(|r| r == name).expect("role member");
            let block = format!("gmm:{name}:diff");
            for lag in a..=b {
                if spec.collapse {
                    columns.push(InstrumentColumn { block: block.clone(), source: Source::LagLevel { var, lag, period: None } });
                } else {
                    for &t in diff_periods {
                        if t - lag as i64 >= t0 {
                            columns.push(InstrumentColumn {
                                block: block.clone(),
                                source: Source::LagLevel { var, lag, period: Some(t) },
                            });
                        }
                    }
                }
            }
            if spec.level_instruments {
                let block = format!("gmm:{name}:level");
                let lag = a - 1;
                if spec.collapse {
                    columns.push(InstrumentColumn { block, source: Source::LagDiff { var, lag, period: None } });
                } else {
                    for &t in &periods {
                        if t - lag as i64 - 1 >= t0 {
                            columns.push(InstrumentColumn {
                                block: block.clone(),
                                source: Source::LagDiff { var, lag, period: Some(t) },
                            });
                        }
                    }
                }
            }
        }
        for name in &spec.exogenous {
            let col = reg_names.iter().position(|r| r == name).expect("role member");
            columns.push(InstrumentColumn { block: format!("iv:{name}:diff"), source: Source::Own { col, eq: Equation::Diff } });
            columns.push(InstrumentColumn { block: format!("iv:{name}:level"), source: Source::Own { col, eq: Equation::Level } });
        }
        for col in n_named..k {
            let block = if col == n_named { "iv:_cons:level".to_string() } else { "iv:fe:level".to_string() };
            columns.push(InstrumentColumn { block, source: Source::Own { col, eq: Equation::Level } });
        }

        let instrument = |c: &InstrumentColumn, u: usize, t: i64, eq: Equation, xrow: &[f64]| -> f64 {
            match (&c.source, eq) {
                (Source::LagLevel { var, lag, period }, Equation::Diff) => {
                    if period.is_some_and(|p| p != t) {
                        return 0.0;
                    }
                    store.get(*var, u, t - *lag as i64).unwrap_or(0.0)
                }
                (Source::LagDiff { var, lag, period }, Equation::Level) => {
                    if period.is_some_and(|p| p != t) {
                        return 0.0;
                    }
                    store.diff(*var, u, t - *lag as i64).unwrap_or(0.0)
                }
                (Source::Own { col, eq: e }, _) if *e == eq => xrow[*col],
                _ => 0.0,
            }
        };

        let mut units = Vec::with_capacity(unit_ids.len());
        let (mut n_diff_rows, mut n_level_rows) = (0, 0);
        for u in 0..unit_ids.len() {
            let mut zs: Vec<Vec<f64>> = Vec::new();
            let mut xs: Vec<Vec<f64>> = Vec::new();
            let mut ys: Vec<f64> = Vec::new();
            let mut diff_period = Vec::new();
            for &t in diff_periods {
                if let (Some(now), Some(prev), Some(yn), Some(yp)) =
                    (full_row(u, t), full_row(u, t - 1), store.get(0, u, t), store.get(0, u, t - 1))
                {
                    let dx: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| a - b).collect();
                    zs.push(columns.iter().map(|c| instrument(c, u, t, Equation::Diff, &dx)).collect());
                    xs.push(dx);
                    ys.push(yn - yp);
                    diff_period.push(Some(t));
                }
            }
            let nd = ys.len();
            for &t in &periods {
                if let (Some(row), Some(yv)) = (full_row(u, t), store.get(0, u, t)) {
                    zs.push(columns.iter().map(|c| instrument(c, u, t, Equation::Level, &row)).collect());
                    xs.push(row);
                    ys.push(yv);
                    diff_period.push(None);
                }
            }
            let r = ys.len();
            if r == 0 {
                continue;
            }
            n_diff_rows += nd;
            n_level_rows += r - nd;
            let mut h = DMatrix::zeros(r, r);
            for i in 0..r {
                if i < nd {
                    h[(i, i)] = 2.0;
                    if i + 1 < nd && diff_period[i + 1] == diff_period[i].map(|t| t + 1) {
                        h[(i, i + 1)] = -1.0;
                        h[(i + 1, i)] = -1.0;
                    }
                } else {
                    h[(i, i)] = 1.0;
                }
            }
            units.push(UnitBlock {
                z: DMatrix::from_fn(r, columns.len(), |i, j| zs[i][j]),
                x: DMatrix::from_fn(r, k, |i, j| xs[i][j]),
                y: DVector::from_vec(ys),
                h,
                diff_period,
            });
        }

        // Columns that never take a nonzero value carry no moment.
        let keep: Vec<usize> = (0..columns.len()).filter(|&j| units.iter().any(|b| b.z.column(j).iter().any(|&v| v != 0.0))).collect();
        let columns: Vec<InstrumentColumn> = keep.iter().map(|&j| columns[j].clone()).collect();
        for b in &mut units {
            b.z = b.z.select_columns(&keep);
        }
        Ok(Self { units, names, columns, periods, n_diff_rows, n_level_rows })
    }

    pub fn n_instruments(&self) -> usize {
        self.columns.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Instrument counts per block label, in layout order.
    pub fn blocks(&self) -> IndexMap<String, usize> {
        let mut out = IndexMap::new();
        for c in &self.columns {
            *out.entry(c.block.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Column indices for a subset label: an exact block label, a prefix
    /// such as `gmm:x`, or `gmm:level` for every lagged-difference block.
    pub fn subset_columns(&self, label: &str) -> Result<Vec<usize>, GmmError> {
        if label.is_empty() {
            return Ok(vec![]);
        }
        let cols: Vec<usize> = (0..self.columns.len())
            .filter(|&j| {
                let b = &self.columns[j].block;
                b == label
                    || b.starts_with(&format!("{label}:"))
                    || (label == "gmm:level" && b.starts_with("gmm:") && b.ends_with(":level"))
            })
            .collect();
        if cols.is_empty() {
            return Err(GmmError::SubsetNotFound(label.into()));
        }
        Ok(cols)
    }

    /// Two-step estimation using the instrument columns `cols` in the given
    /// order.
    pub fn estimate(&self, cols: &[usize]) -> Result<GmmEstimate, GmmError> {
        let (l, k) = (cols.len(), self.n_params());
        if l < k {
            return Err(GmmError::Underidentified { params: k, instruments: l });
        }
        let mut warnings = Vec::new();
        let zs: Vec<DMatrix<f64>> = self.units.iter().map(|b| b.z.select_columns(cols)).collect();
        let mut zx = DMatrix::zeros(l, k);
        let mut zy = DVector::zeros(l);
        let mut zhz = DMatrix::zeros(l, l);
        for (b, z) in self.units.iter().zip(&zs) {
            let zt = z.transpose();
            zx += &zt * &b.x;
            zy += &zt * &b.y;
            zhz += &zt * &b.h * z;
        }
        let a1 = weight_inverse(&zhz, "one-step", &mut warnings);
        let solve = |a: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>), GmmError> {
            let xza = zx.transpose() * a;
            let m = &xza * &zx;
            let minv = linalg::inverse_spd(&linalg_sym(&m)).ok_or(GmmError::RankDeficient)?;
            Ok((&minv * (&xza * &zy), minv))
        };
        let (beta1, m1inv) = solve(&a1)?;
        let u1: Vec<DVector<f64>> = self.units.iter().map(|b| &b.y - &b.x * &beta1).collect();
        let g1: Vec<DVector<f64>> = zs.iter().zip(&u1).map(|(z, u)| z.transpose() * u).collect();
        let mut s1 = DMatrix::zeros(l, l);
        for g in &g1 {
            s1 += g * g.transpose();
        }
        let bread1 = &m1inv * zx.transpose() * &a1;
        let mut v1r = &bread1 * &s1 * bread1.transpose();
        linalg::symmetrize(&mut v1r);

        let a2 = weight_inverse(&s1, "two-step", &mut warnings);
        let (beta2, v2) = solve(&a2)?;
        let u2: Vec<DVector<f64>> = self.units.iter().map(|b| &b.y - &b.x * &beta2).collect();
        let mut zu2 = DVector::zeros(l);
        for (z, u) in zs.iter().zip(&u2) {
            zu2 += z.transpose() * u;
        }
        let j_stat = (zu2.transpose() * &a2 * &zu2)[(0, 0)];

        // Windmeijer: derivative of the two-step estimator with respect to
        // the one-step estimate through the weight matrix.
        let lead = &v2 * zx.transpose() * &a2;
        let tail = &a2 * &zu2;
        let mut d = DMatrix::zeros(k, k);
        for c in 0..k {
            let mut dw = DMatrix::zeros(l, l);
            for ((b, z), g) in self.units.iter().zip(&zs).zip(&g1) {
                let a = z.transpose() * b.x.column(c);
                dw -= &a * g.transpose() + g * a.transpose();
            }
            let col = -(&lead * dw * &tail);
            d.set_column(c, &col);
        }
        let mut vc = &v2 + &d * &v2 + &v2 * d.transpose() + &d * &v1r * d.transpose();
        linalg::symmetrize(&mut vc);

        Ok(GmmEstimate {
            cols: cols.to_vec(),
            beta1,
            beta2,
            v1_robust: v1r,
            v2,
            windmeijer: vc,
            a2,
            j_stat,
            u2,
            warnings,
        })
    }

    pub fn all_columns(&self) -> Vec<usize> {
        (0..self.n_instruments()).collect()
    }

    pub fn hansen_j(&self, est: &GmmEstimate) -> HansenTest {
        let df = est.cols.len() - self.n_params();
        if df == 0 {
            return HansenTest { stat: 0.0, df, p: None };
        }
        HansenTest { stat: est.j_stat, df, p: chi2_sf(est.j_stat, df) }
    }

    /// Difference between the full Hansen statistic and the statistic with
    /// the subset removed and the model re-estimated.
    pub fn diff_hansen(&self, est: &GmmEstimate, label: &str) -> Result<DiffHansen, GmmError> {
        let subset: BTreeSet<usize> = self.subset_columns(label)?.into_iter().collect();
        let inside: Vec<usize> = est.cols.iter().copied().filter(|c| subset.contains(c)).collect();
        if inside.is_empty() {
            return Ok(DiffHansen { subset: label.into(), size: 0, stat: 0.0, p: None });
        }
        let rest: Vec<usize> = est.cols.iter().copied().filter(|c| !subset.contains(c)).collect();
        let restricted = self.estimate(&rest)?;
        let j_rest = if rest.len() == self.n_params() { 0.0 } else { restricted.j_stat };
        let full = if est.cols.len() == self.n_params() { 0.0 } else { est.j_stat };
        let stat = full - j_rest;
        Ok(DiffHansen { subset: label.into(), size: inside.len(), stat, p: chi2_sf(stat, inside.len()) })
    }

    /// Arellano–Bond test for serial correlation of order `order` in the
    /// differenced residuals.
    pub fn ar_test(&self, est: &GmmEstimate, order: usize) -> Result<ArTest, GmmError> {
        if order == 0 || order + 3 > self.n_periods() {
            return Err(GmmError::InsufficientPeriods { order });
        }
        let (l, k) = (est.cols.len(), self.n_params());
        let mut num = 0.0;
        let mut d0 = 0.0;
        let mut wx = DVector::zeros(k);
        let mut zuuw = DVector::zeros(l);
        let mut any_nonzero = false;
        for (b, u) in self.units.iter().zip(&est.u2) {
            let r = u.len();
            let mut w = DVector::zeros(r);
            for i in 0..r {
                if let Some(t) = b.diff_period[i] {
                    let target = Some(t - order as i64);
                    if let Some(jrow) = (0..r).find(|&j| b.diff_period[j] == target) {
                        w[i] = u[jrow];
                    }
                }
            }
            any_nonzero |= u.iter().any(|&v| v.abs() > 1e-12);
            let wu = w.dot(u);
            num += wu;
            d0 += wu * wu;
            wx += b.x.transpose() * &w;
            zuuw += b.z.select_columns(&est.cols).transpose() * u * wu;
        }
        if !any_nonzero {
            return Err(GmmError::Degenerate("all residuals are zero".into()));
        }
        let cross = (wx.transpose() * &est.v2 * self.zx(&est.cols).transpose() * &est.a2 * &zuuw)[(0, 0)];
        let var = d0 - 2.0 * cross + (wx.transpose() * &est.windmeijer * &wx)[(0, 0)];
        if !(var > 0.0) {
            return Err(GmmError::Degenerate(format!("AR({order}) variance is {var:.3e}")));
        }
        let z = num / var.sqrt();
        Ok(ArTest { order, z, p: normal_two_sided_p(z) })
    }

    fn zx(&self, cols: &[usize]) -> DMatrix<f64> {
        let mut zx = DMatrix::zeros(cols.len(), self.n_params());
        for b in &self.units {
            zx += b.z.select_columns(cols).transpose() * &b.x;
        }
        zx
    }

    /// Pooled OLS on the level rows, the naive comparison estimator.
    pub fn pooled_ols(&self) -> Result<DVector<f64>, GmmError> {
        let k = self.n_params();
        let mut xtx = DMatrix::zeros(k, k);
        let mut xty = DVector::zeros(k);
        for b in &self.units {
            for i in 0..b.y.len() {
                if b.diff_period[i].is_none() {
                    let xi = b.x.row(i).transpose();
                    xtx += &xi * xi.transpose();
                    xty += &xi * b.y[i];
                }
            }
        }
        let inv = linalg::inverse_spd(&xtx).ok_or(GmmError::RankDeficient)?;
        Ok(inv * xty)
    }
}

fn linalg_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m.clone();
    linalg::symmetrize(&mut m);
    m
}

/// Inverse of a moment weight matrix with ridge then pseudo-inverse fallbacks.
fn weight_inverse(w: &DMatrix<f64>, stage: &str, warnings: &mut Vec<String>) -> DMatrix<f64> {
    let w = linalg_sym(w);
    let well_conditioned = |inv: &DMatrix<f64>| {
        let check = &w * inv;
        (check - DMatrix::identity(w.nrows(), w.nrows())).abs().max() < 1e-6
    };
    if let Some(inv) = linalg::inverse_spd(&w).filter(well_conditioned) {
        return inv;
    }
    let ridge = 1e-10 * w.trace();
    let ridged = &w + DMatrix::identity(w.nrows(), w.nrows()) * ridge;
    if let Some(inv) = linalg::inverse_spd(&ridged) {
        warnings.push(format!("{stage} weight matrix singular; ridge {ridge:.3e} applied"));
        return inv;
    }
    warnings.push(format!("{stage} weight matrix singular; pseudo-inverse used"));
    linalg::pseudo_inverse(&w)
}

/// Raw two-step output for one instrument set.
#[derive(Debug, Clone)]
pub struct GmmEstimate {
    pub cols: Vec<usize>,
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    pub v1_robust: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub windmeijer: DMatrix<f64>,
    a2: DMatrix<f64>,
    j_stat: f64,
    u2: Vec<DVector<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HansenTest {
    pub stat: f64,
    pub df: usize,
    /// Undefined when the model is exactly identified.
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffHansen {
    pub subset: String,
    pub size: usize,
    pub stat: f64,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArTest {
    pub order: usize,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmResult {
    pub coefficients: IndexMap<String, f64>,
    /// Windmeijer-corrected standard errors.
    pub std_errors: IndexMap<String, f64>,
    pub one_step: IndexMap<String, f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub one_step_covariance: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub two_step_covariance: DMatrix<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub windmeijer_covariance: DMatrix<f64>,
    pub n_instruments: usize,
    pub n_params: usize,
    pub n_units: usize,
    pub n_diff_rows: usize,
    pub n_level_rows: usize,
    pub instrument_blocks: IndexMap<String, usize>,
    pub hansen_j: HansenTest,
    pub diff_hansen: Vec<DiffHansen>,
    pub ar_tests: BTreeMap<usize, ArTest>,
    pub missing_lags: &'static str,
    pub advisory: &'static str,
    pub warnings: Vec<String>,
}

impl GmmResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.get(name).copied()
    }
}

/// Builds the system, fits it and runs the standard diagnostics: Hansen J,
/// difference-in-Hansen for every GMM block, AR(1) and AR(2).
pub fn fit_system_gmm(frame: &Frame, spec: &GmmSpec) -> Result<GmmResult, GmmError> {
    let system = SystemGmm::from_frame(frame, spec)?;
    let est = system.estimate(&system.all_columns())?;
    let mut warnings = est.warnings.clone();
    let hansen_j = system.hansen_j(&est);
    let mut diff_hansen = Vec::new();
    if hansen_j.df > 0 {
        for (block, _) in system.blocks() {
            if !block.starts_with("gmm:") {
                continue;
            }
            match system.diff_hansen(&est, &block) {
                Ok(d) => diff_hansen.push(d),
                Err(e) => warnings.push(format!("difference-in-Hansen for `{block}` skipped: {e}")),
            }
        }
    }
    let mut ar_tests = BTreeMap::new();
    for order in 1..=2 {
        match system.ar_test(&est, order) {
            Ok(t) => {
                ar_tests.insert(order, t);
            }
            Err(e) => warnings.push(format!("AR({order}) skipped: {e}")),
        }
    }
    let named = |v: &DVector<f64>| -> IndexMap<String, f64> { system.names.iter().cloned().zip(v.iter().copied()).collect() };
    Ok(GmmResult {
        coefficients: named(&est.beta2),
        std_errors: named(&DVector::from_iterator(system.n_params(), est.windmeijer.diagonal().iter().map(|v| v.max(0.0).sqrt()))),
        one_step: named(&est.beta1),
        one_step_covariance: est.v1_robust.clone(),
        two_step_covariance: est.v2.clone(),
        windmeijer_covariance: est.windmeijer.clone(),
        n_instruments: system.n_instruments(),
        n_params: system.n_params(),
        n_units: system.n_units(),
        n_diff_rows: system.n_diff_rows,
        n_level_rows: system.n_level_rows,
        instrument_blocks: system.blocks(),
        hansen_j,
        diff_hansen,
        ar_tests,
        missing_lags: "zero-filled",
        advisory: HANSEN_ADVISORY,
        warnings,
    })
}
