//! Sector-based job-prospect signals.
//!
//! Employment series are turned into growth rates, growth rates into the
//! job-trending indicator (the annual change of the growth rate), and pairs of
//! indicators into origin/destination distances, optionally on a started-log
//! scale.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::city::CityId;

/// First and last calendar years an employment series may cover.
pub const FIRST_YEAR: i32 = 1995;
pub const LAST_YEAR: i32 = 2017;

/// Default `ε` for [`fit_started_log_offset`].
pub const DEFAULT_OFFSET_EPSILON: f64 = 1.0 + 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrendingError {
    #[error("year {0} is missing from the employment series")]
    MissingYear(i32),
    #[error("employment base is zero in year {0}")]
    ZeroBase(i32),
    #[error("trending values are dated {origin} and {dest}")]
    YearMismatch { origin: i32, dest: i32 },
    #[error("cannot fit a started-log offset on an empty sample")]
    EmptyInput,
    #[error("started log undefined: shifted value {0} is not positive")]
    DomainError(f64),
    #[error("invalid employment series: {0}")]
    InvalidSeries(String),
    #[error("employment csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Primary,
    Secondary,
    Tertiary,
    Total,
}

impl Sector {
    pub const ALL: [Sector; 4] = [Sector::Primary, Sector::Secondary, Sector::Tertiary, Sector::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Sector::Primary => "primary",
            Sector::Secondary => "secondary",
            Sector::Tertiary => "tertiary",
            Sector::Total => "total",
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Sector::Primary => 1,
            Sector::Secondary => 2,
            Sector::Tertiary => 3,
            Sector::Total => 0,
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "primary" | "1" => Ok(Sector::Primary),
            "secondary" | "2" => Ok(Sector::Secondary),
            "tertiary" | "3" => Ok(Sector::Tertiary),
            "total" | "0" => Ok(Sector::Total),
            other => Err(format!("unknown sector `{other}`")),
        }
    }
}

/// Annual employment counts of one sector in one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorEmploymentSeries {
    pub city_id: CityId,
    pub sector: Sector,
    employment: BTreeMap<i32, f64>,
}

impl SectorEmploymentSeries {
    /// Validates nonnegative counts and a contiguous year range inside
    /// `[FIRST_YEAR, LAST_YEAR]`.
    pub fn new(
        city_id: CityId,
        sector: Sector,
        employment: BTreeMap<i32, f64>,
    ) -> Result<Self, TrendingError> {
        if let Some((&year, &count)) = employment.iter().find(|(_, &e)| !(e >= 0.0) || !e.is_finite()) {
            return Err(TrendingError::InvalidSeries(format!(
                "{city_id}/{sector}: employment {count} in {year} is not a nonnegative count"
            )));
        }
        if let (Some((&first, _)), Some((&last, _))) =
            (employment.first_key_value(), employment.last_key_value())
        {
            if first < FIRST_YEAR || last > LAST_YEAR {
                return Err(TrendingError::InvalidSeries(format!(
                    "{city_id}/{sector}: years {first}..={last} outside {FIRST_YEAR}..={LAST_YEAR}"
                )));
            }
            if (last - first + 1) as usize != employment.len() {
                return Err(TrendingError::InvalidSeries(format!(
                    "{city_id}/{sector}: years {first}..={last} are not contiguous"
                )));
            }
        }
        Ok(Self { city_id, sector, employment })
    }

    pub fn employment(&self, year: i32) -> Option<f64> {
        self.employment.get(&year).copied()
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.employment.keys().copied()
    }

    /// Same series with every count multiplied by `k`.
    pub fn rescaled(&self, k: f64) -> Self {
        Self {
            city_id: self.city_id,
            sector: self.sector,
            employment: self.employment.iter().map(|(&y, &e)| (y, e * k)).collect(),
        }
    }
}

/// Annual change in the employment growth rate, dated by its year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendingValue {
    pub value: f64,
    pub year: i32,
}

impl TrendingValue {
    pub fn new(value: f64, year: i32) -> Self {
        debug_assert!(value.is_finite());
        Self { value, year }
    }
}

/// Shift `c` of the started logarithm `ln(y + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartedLogOffset(f64);

impl StartedLogOffset {
    pub fn new(c: f64) -> Result<Self, TrendingError> {
        if c > 0.0 && c.is_finite() {
            Ok(Self(c))
        } else {
            Err(TrendingError::DomainError(c))
        }
    }

    pub fn c(self) -> f64 {
        self.0
    }
}

/// Optional winsorizing of growth rates, off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrendingConfig {
    /// Clamp `|GR|` to this bound when set.
    pub growth_clamp: Option<f64>,
}

pub fn growth_rate(series: &SectorEmploymentSeries, year: i32) -> Result<f64, TrendingError> {
    let current = series.employment(year).ok_or(TrendingError::MissingYear(year))?;
    let base = series.employment(year - 1).ok_or(TrendingError::MissingYear(year - 1))?;
    if base == 0.0 {
        return Err(TrendingError::ZeroBase(year - 1));
    }
    Ok((current - base) / base)
}

pub fn job_trending(series: &SectorEmploymentSeries, year: i32) -> Result<TrendingValue, TrendingError> {
    job_trending_with(series, year, &TrendingConfig::default())
}

pub fn job_trending_with(
    series: &SectorEmploymentSeries,
    year: i32,
    config: &TrendingConfig,
) -> Result<TrendingValue, TrendingError> {
    let clamp = |g: f64| match config.growth_clamp {
        Some(bound) => g.clamp(-bound, bound),
        None => g,
    };
    let now = clamp(growth_rate(series, year)?);
    let before = clamp(growth_rate(series, year - 1)?);
    Ok(TrendingValue::new(now - before, year))
}

/// Every year for which the indicator is defined. Undefined years are absent.
pub fn trending_path(series: &SectorEmploymentSeries, config: &TrendingConfig) -> BTreeMap<i32, f64> {
    series
        .years()
        .filter_map(|y| job_trending_with(series, y, config).ok().map(|t| (y, t.value)))
        .collect()
}

pub fn trending_distance(origin: TrendingValue, dest: TrendingValue) -> Result<f64, TrendingError> {
    if origin.year != dest.year {
        return Err(TrendingError::YearMismatch { origin: origin.year, dest: dest.year });
    }
    Ok(dest.value - origin.value)
}

/// `c = ε + max(0, -min(values))`.
pub fn fit_started_log_offset<I>(values: I, epsilon: f64) -> Result<StartedLogOffset, TrendingError>
where
    I: IntoIterator<Item = f64>,
{
    let min = values.into_iter().fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |m| m.min(v)))
    });
    let min = min.ok_or(TrendingError::EmptyInput)?;
    StartedLogOffset::new(epsilon + (-min).max(0.0))
}

pub fn trending_distance_log(
    origin: TrendingValue,
    dest: TrendingValue,
    offset: StartedLogOffset,
) -> Result<f64, TrendingError> {
    if origin.year != dest.year {
        return Err(TrendingError::YearMismatch { origin: origin.year, dest: dest.year });
    }
    let c = offset.c();
    let (o, d) = (origin.value + c, dest.value + c);
    for shifted in [o, d] {
        if shifted <= 0.0 {
            return Err(TrendingError::DomainError(shifted));
        }
    }
    Ok(d.ln() - o.ln())
}

/// Employment series keyed by city and sector.
#[derive(Debug, Clone, Default)]
pub struct EmploymentTable {
    series: BTreeMap<(CityId, Sector), SectorEmploymentSeries>,
}

#[derive(Debug, Deserialize)]
struct EmploymentRecord {
    city_id: String,
    sector: String,
    year: i32,
    employment: f64,
}

impl EmploymentTable {
    pub fn from_series(series: impl IntoIterator<Item = SectorEmploymentSeries>) -> Self {
        Self { series: series.into_iter().map(|s| ((s.city_id, s.sector), s)).collect() }
    }

    /// Reads `city_id, sector, year, employment` rows.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, TrendingError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut grouped: BTreeMap<(CityId, Sector), BTreeMap<i32, f64>> = BTreeMap::new();
        for (line, record) in rdr.deserialize::<EmploymentRecord>().enumerate() {
            let record = record.map_err(|e| TrendingError::Csv(e.to_string()))?;
            let city = CityId::from_code(&record.city_id)
                .map_err(|e| TrendingError::Csv(format!("row {}: {e}", line + 1)))?;
            let sector = record
                .sector
                .parse::<Sector>()
                .map_err(|e| TrendingError::Csv(format!("row {}: {e}", line + 1)))?;
            if grouped.entry((city, sector)).or_default().insert(record.year, record.employment).is_some() {
                return Err(TrendingError::Csv(format!(
                    "row {}: duplicate entry for {city}/{sector}/{}",
                    line + 1,
                    record.year
                )));
            }
        }
        let series = grouped
            .into_iter()
            .map(|((city, sector), emp)| SectorEmploymentSeries::new(city, sector, emp))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_series(series))
    }

    pub fn get(&self, city: CityId, sector: Sector) -> Option<&SectorEmploymentSeries> {
        self.series.get(&(city, sector))
    }

    pub fn trending(
        &self,
        city: CityId,
        sector: Sector,
        year: i32,
        config: &TrendingConfig,
    ) -> Option<TrendingValue> {
        self.get(city, sector).and_then(|s| job_trending_with(s, year, config).ok())
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}
