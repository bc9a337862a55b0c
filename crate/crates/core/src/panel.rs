//! Survey records to estimation-ready person-year dyads.
//!
//! Each respondent is classified as a native or one of four migrant types,
//! paired with a destination city and a move year, and expanded into one row
//! per working-age year against longitudinal city statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::city::CityId;
use crate::frame::Frame;
use crate::trending::{
    fit_started_log_offset, EmploymentTable, Sector, StartedLogOffset, TrendingConfig, DEFAULT_OFFSET_EPSILON,
};

/// Calendar span of the quasi-panel.
pub const PANEL_YEARS: (i32, i32) = (1997, 2017);
/// Working-age window, inclusive.
pub const AGE_WINDOW: (i32, i32) = (16, 65);
/// The CHRI index has one value for 2000–2013 and another from 2014.
pub const CHRI_STAGES: [(i32, i32); 2] = [(2000, 2013), (2014, 2017)];
const VALID_YEARS: (i32, i32) = (1900, 2017);

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("city statistics row {line}: {message}")]
    CityStats { line: usize, message: String },
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A survey row that failed to parse or validate. Collected per row; the rest
/// of the batch is still processed.
#[derive(Debug, Clone, Error, PartialEq, Serialize)]
#[error("survey row {line}: {message}")]
pub struct SchemaError {
    pub line: usize,
    pub message: String,
}

/// City-years that migrant rows need but the statistics file lacks.
#[derive(Debug, Clone, Error, PartialEq, Serialize)]
#[error("city statistics missing for {} city-years, first {:?}", missing.len(), missing.first())]
pub struct CoverageError {
    pub missing: Vec<(CityId, i32)>,
}

/// One respondent. Answer fields keep their questionnaire codes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub person_id: u64,
    pub family_id: u64,
    #[serde(deserialize_with = "bit")]
    pub hhead: bool,
    #[serde(default)]
    pub a2001: Option<u8>,
    /// City of residence.
    #[serde(default)]
    pub a2016b: Option<CityId>,
    /// Current hukou city.
    #[serde(default)]
    pub a2019: Option<CityId>,
    /// Lives in the hukou city (1 = yes).
    #[serde(default)]
    pub a2019b: Option<u8>,
    /// Year of arrival in the residence city.
    #[serde(default)]
    pub a2019e: Option<i32>,
    /// Year of leaving the hukou city.
    #[serde(default)]
    pub a2019f: Option<i32>,
    /// Hukou transferred (1 = yes).
    #[serde(default)]
    pub a2022k: Option<u8>,
    /// Year of the hukou transfer.
    #[serde(default)]
    pub a2022l: Option<i32>,
    /// Hukou city before the transfer.
    #[serde(default)]
    pub a2022m: Option<CityId>,
    /// Ever left and came back (1 = yes, 2 = never).
    #[serde(default)]
    pub a2023g: Option<u8>,
    /// Last city lived in before returning.
    #[serde(default)]
    pub a2023j: Option<CityId>,
    /// Year of leaving for that city.
    #[serde(default)]
    pub a2023k: Option<i32>,
    /// Work history (2 = never worked).
    #[serde(default)]
    pub a3138: Option<u8>,
    /// Year the last job ended.
    #[serde(default)]
    pub a3139: Option<i32>,
    #[serde(default)]
    pub surveyed_city: Option<CityId>,
    pub birth_year: i32,
    #[serde(default)]
    pub gender: Option<f64>,
    #[serde(default)]
    pub marriage: Option<f64>,
    #[serde(default)]
    pub hukou_type: Option<f64>,
    #[serde(default)]
    pub health: Option<f64>,
    #[serde(default)]
    pub hh_income: Option<f64>,
    #[serde(default)]
    pub schooling_2017: Option<f64>,
    /// Employment sector; empty for non-employees, who use total employment.
    #[serde(default, deserialize_with = "sector")]
    pub sector: Option<Sector>,
}

fn bit<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
    }
}

fn sector<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Sector>, D::Error> {
    let raw: Option<String> = Option::deserialize(d)?;
    match raw.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

impl SurveyRow {
    pub fn validate(&self) -> Result<(), String> {
        let years = [
            ("a2019e", self.a2019e),
            ("a2019f", self.a2019f),
            ("a2022l", self.a2022l),
            ("a2023k", self.a2023k),
            ("a3139", self.a3139),
            ("birth_year", Some(self.birth_year)),
        ];
        for (name, year) in years {
            if let Some(y) = year {
                if !(VALID_YEARS.0..=VALID_YEARS.1).contains(&y) {
                    return Err(format!("{name}={y} outside {}..={}", VALID_YEARS.0, VALID_YEARS.1));
                }
            }
        }
        Ok(())
    }

    fn transferred(&self) -> bool {
        self.a2022k == Some(1)
    }

    /// `surveyed_city` is only trusted for household heads.
    fn householder_city(&self) -> Option<CityId> {
        self.surveyed_city.filter(|_| self.hhead)
    }
}

/// Parsed survey rows plus the rows that were rejected.
#[derive(Debug, Clone, Default)]
pub struct SurveyBatch {
    pub rows: Vec<SurveyRow>,
    pub errors: Vec<SchemaError>,
}

pub fn read_survey_csv<R: Read>(reader: R) -> Result<SurveyBatch, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut batch = SurveyBatch::default();
    for (i, record) in rdr.deserialize::<SurveyRow>().enumerate() {
        let line = i + 2;
        match record {
            Ok(row) => match row.validate() {
                Ok(()) => batch.rows.push(row),
                Err(message) => batch.errors.push(SchemaError { line, message }),
            },
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => batch.errors.push(SchemaError { line, message: e.to_string() }),
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrantKind {
    Native,
    Floating,
    Returnee,
    /// Hukou transferred and living in the new hukou city.
    TransferResident,
    /// Hukou transferred, living somewhere else.
    TransferElsewhere,
    Dropped,
}

impl MigrantKind {
    pub fn is_migrant(self) -> bool {
        !matches!(self, MigrantKind::Native | MigrantKind::Dropped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NeverWorked,
    /// Arrival and departure years disagree: more than one move.
    MultiMove,
    MissingMoveYear,
    MissingOrigin,
    /// Would need `surveyed_city` for someone who is not the household head.
    HouseholderRestriction,
    /// Return destination known but not when they left for it.
    DestinationWithoutYear,
    /// Former hukou city equals the return destination and the transfer did
    /// not precede the departure.
    TransferBeforeReturnUnresolved,
    TransferWithoutHukouCity,
    TransferMissingPairing,
    /// Destination resolves to the origin city.
    Unpairable,
    /// Household head surveyed outside the native's origin city.
    SurveyedCityMismatch,
    MoveOutsidePanel,
    MoveOutsideAgeWindow,
    /// Last job ended before the move.
    JobEndedBeforeMove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrantStatus {
    pub kind: MigrantKind,
    pub origin: Option<CityId>,
    pub destination: Option<CityId>,
    pub move_year: Option<i32>,
    pub drop_reason: Option<DropReason>,
}

impl MigrantStatus {
    fn dropped(reason: DropReason) -> Self {
        Self { kind: MigrantKind::Dropped, origin: None, destination: None, move_year: None, drop_reason: Some(reason) }
    }

    fn native(origin: CityId) -> Self {
        Self { kind: MigrantKind::Native, origin: Some(origin), destination: Some(origin), move_year: None, drop_reason: None }
    }
}

/// Origin, destination and move year of a migrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Pairing {
    pub origin: CityId,
    pub destination: CityId,
    pub move_year: i32,
}

/// Which migrant test a row passes, before pairing. `None` means native.
pub fn migrant_kind(row: &SurveyRow) -> Option<MigrantKind> {
    let transfer = row.transferred();
    let hukou_mismatch = matches!((row.a2016b, row.a2019), (Some(r), Some(h)) if r != h);
    if !transfer && (row.a2019e.is_some() || hukou_mismatch) {
        return Some(MigrantKind::Floating);
    }
    if row.a2023g == Some(1) {
        return Some(MigrantKind::Returnee);
    }
    if transfer {
        return Some(MigrantKind::TransferResident);
    }
    None
}

/// Pairs a migrant with origin, destination and move year.
///
/// For transfers the returned kind may turn out to be native (the person
/// lives in the pre-transfer city) or either transfer variant.
pub fn resolve_destination(row: &SurveyRow, kind: MigrantKind) -> Result<(MigrantKind, Option<Pairing>), DropReason> {
    match kind {
        MigrantKind::Floating => {
            let origin = row.a2019.ok_or(DropReason::MissingOrigin)?;
            if let (Some(e), Some(f)) = (row.a2019e, row.a2019f) {
                if e != f {
                    return Err(DropReason::MultiMove);
                }
            }
            let move_year = row.a2019e.or(row.a2019f).ok_or(DropReason::MissingMoveYear)?;
            let destination =
                row.a2016b.or_else(|| row.householder_city()).ok_or(DropReason::HouseholderRestriction)?;
            paired(kind, origin, destination, move_year)
        }
        MigrantKind::Returnee => match (row.a2023j, row.a2023k) {
            (Some(destination), Some(move_year)) => {
                let origin = row.a2019.or_else(|| row.householder_city()).ok_or(DropReason::MissingOrigin)?;
                if row.transferred() && row.a2022m == Some(destination) && !row.a2022l.is_some_and(|l| l < move_year) {
                    return Err(DropReason::TransferBeforeReturnUnresolved);
                }
                paired(kind, origin, destination, move_year)
            }
            (Some(_), None) => Err(DropReason::DestinationWithoutYear),
            (None, _) => {
                // Fall back to the transfer itself as the move.
                let (Some(origin), Some(destination)) = (row.a2022m, row.a2019) else {
                    return Err(DropReason::Unpairable);
                };
                if !row.transferred() {
                    return Err(DropReason::Unpairable);
                }
                let move_year =
                    row.a2023k.or(row.a2022l.map(|l| l - 1)).ok_or(DropReason::MissingMoveYear)?;
                paired(kind, origin, destination, move_year)
            }
        },
        MigrantKind::TransferResident | MigrantKind::TransferElsewhere => {
            let hukou = row.a2019.ok_or(DropReason::TransferWithoutHukouCity)?;
            if row.a2019b.is_none() && row.a2023g.is_none() {
                return Err(DropReason::TransferMissingPairing);
            }
            let origin = row.a2022m.ok_or(DropReason::MissingOrigin)?;
            if origin == hukou {
                return Ok((MigrantKind::Native, None));
            }
            let resident = match (row.a2016b, row.a2019b) {
                (Some(city), _) => city,
                (None, Some(1)) => hukou,
                _ => row.householder_city().ok_or(DropReason::HouseholderRestriction)?,
            };
            if resident == origin {
                return Ok((MigrantKind::Native, None));
            }
            if let (Some(e), Some(f)) = (row.a2019e, row.a2019f) {
                if e != f {
                    return Err(DropReason::MultiMove);
                }
            }
            let kind =
                if resident == hukou { MigrantKind::TransferResident } else { MigrantKind::TransferElsewhere };
            match row.a2019f.or(row.a2019e) {
                Some(move_year) => paired(kind, origin, resident, move_year),
                // Assume the move happened the year before the transfer.
                None => {
                    let transfer_year = row.a2022l.ok_or(DropReason::MissingMoveYear)?;
                    paired(MigrantKind::TransferResident, origin, hukou, transfer_year - 1)
                }
            }
        }
        MigrantKind::Native | MigrantKind::Dropped => Ok((kind, None)),
    }
}

fn paired(
    kind: MigrantKind,
    origin: CityId,
    destination: CityId,
    move_year: i32,
) -> Result<(MigrantKind, Option<Pairing>), DropReason> {
    if origin == destination {
        return Err(DropReason::Unpairable);
    }
    Ok((kind, Some(Pairing { origin, destination, move_year })))
}

fn native_status(row: &SurveyRow) -> MigrantStatus {
    let Some(origin) = row.a2022m.or(row.a2019).or(row.a2016b).or(row.surveyed_city) else {
        return MigrantStatus::dropped(DropReason::MissingOrigin);
    };
    if row.householder_city().is_some_and(|s| s != origin) {
        return MigrantStatus::dropped(DropReason::SurveyedCityMismatch);
    }
    MigrantStatus::native(origin)
}

pub fn classify(row: &SurveyRow) -> MigrantStatus {
    if row.a3138 == Some(2) {
        return MigrantStatus::dropped(DropReason::NeverWorked);
    }
    let Some(kind) = migrant_kind(row) else {
        return native_status(row);
    };
    match resolve_destination(row, kind) {
        Err(reason) => MigrantStatus::dropped(reason),
        Ok((_, None)) => native_status(row),
        Ok((kind, Some(p))) => MigrantStatus {
            kind,
            origin: Some(p.origin),
            destination: Some(p.destination),
            move_year: Some(p.move_year),
            drop_reason: None,
        },
    }
}

/// 1 iff another member of the family moved strictly before `year`.
pub fn pioneer_flag(family: &[(u64, Option<i32>)], person_id: u64, year: i32) -> bool {
    family.iter().any(|&(id, moved)| id != person_id && moved.is_some_and(|m| m < year))
}

/// City statistics for one city-year; missing cells are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CityYearStats {
    pub lngdppc: Option<f64>,
    pub coop: Option<f64>,
    pub medical: Option<f64>,
    #[serde(rename = "highEdu")]
    pub high_edu: Option<f64>,
    #[serde(rename = "ppDen")]
    pub pp_den: Option<f64>,
    #[serde(rename = "tertiaryRatio")]
    pub tertiary_ratio: Option<f64>,
    pub chri: Option<f64>,
}

/// Covariate names as they appear in the statistics file and, prefixed with
/// `distance_`, in the quasi-panel.
pub const COVARIATES: [&str; 6] = ["lngdppc", "coop", "medical", "highEdu", "ppDen", "tertiaryRatio"];

impl CityYearStats {
    fn covariates(&self) -> [Option<f64>; 6] {
        [self.lngdppc, self.coop, self.medical, self.high_edu, self.pp_den, self.tertiary_ratio]
    }
}

#[derive(Debug, Clone, Default)]
pub struct CityStats {
    by_city_year: BTreeMap<(CityId, i32), CityYearStats>,
}

impl CityStats {
    pub fn insert(&mut self, city: CityId, year: i32, stats: CityYearStats) {
        self.by_city_year.insert((city, year), stats);
    }

    pub fn get(&self, city: CityId, year: i32) -> Option<&CityYearStats> {
        self.by_city_year.get(&(city, year))
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self, PanelError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut out = Self::default();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record?;
            let err = |message: String| PanelError::CityStats { line, message };
            let get = |name: &str| headers.iter().position(|h| h == name).and_then(|c| record.get(c));
            let city = CityId::from_code(get("city_id").unwrap_or_default()).map_err(err)?;
            let year = get("year")
                .unwrap_or_default()
                .parse::<i32>()
                .map_err(|e| err(format!("year: {e}")))?;
            let cell = |name: &str| -> Result<Option<f64>, PanelError> {
                match get(name) {
                    None | Some("") => Ok(None),
                    Some(v) if v.eq_ignore_ascii_case("na") => Ok(None),
                    Some(v) => v.parse().map(Some).map_err(|e| err(format!("{name}: {e}"))),
                }
            };
            let stats = CityYearStats {
                lngdppc: cell("lngdppc")?,
                coop: cell("coop")?,
                medical: cell("medical")?,
                high_edu: cell("highEdu")?,
                pp_den: cell("ppDen")?,
                tertiary_ratio: cell("tertiaryRatio")?,
                chri: cell("chri")?,
            };
            if out.by_city_year.insert((city, year), stats).is_some() {
                return Err(err(format!("duplicate entry for {city}/{year}")));
            }
        }
        Ok(out)
    }

    /// Stage value of the CHRI index for `year`: the mean of the recorded
    /// values within the stage, `None` before the first stage.
    pub fn chri(&self, city: CityId, year: i32) -> Option<f64> {
        let &(lo, hi) = CHRI_STAGES.iter().find(|(lo, hi)| (*lo..=*hi).contains(&year))?;
        let values: Vec<f64> = self
            .by_city_year
            .range((city, lo)..=(city, hi))
            .filter_map(|(_, s)| s.chri)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// One person-year against one origin/destination pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadObservation {
    pub person_id: u64,
    pub family_id: u64,
    pub kind: MigrantKind,
    pub origin: CityId,
    pub destination: CityId,
    pub year: i32,
    pub sector: Sector,
    pub migrate: bool,
    pub distance_jobtrend: f64,
    /// Started-log version; filled once the global offset is known.
    pub distance_jobtrend_log: f64,
    /// Destination minus origin, statistics dated `year − 1`, in
    /// [`COVARIATES`] order.
    pub distances: [Option<f64>; 6],
    pub distance_chri: Option<f64>,
    pub gender: Option<f64>,
    pub marriage: Option<f64>,
    pub hukou_type: Option<f64>,
    pub health: Option<f64>,
    pub hh_income: Option<f64>,
    pub age: i32,
    pub schooling: Option<f64>,
    pub pioneer: bool,
}

/// Where the input went.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DropReport {
    pub input_rows: usize,
    pub schema_errors: usize,
    pub classified: BTreeMap<MigrantKind, usize>,
    pub dropped: BTreeMap<DropReason, usize>,
    /// Person-years discarded because the trending indicator was undefined.
    pub missing_trending_rows: usize,
    pub persons_in_panel: usize,
    pub output_rows: usize,
}

impl DropReport {
    pub fn n_dropped(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn n_classified(&self) -> usize {
        self.classified.iter().filter(|(k, _)| **k != MigrantKind::Dropped).map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone)]
pub struct QuasiPanel {
    pub observations: Vec<DyadObservation>,
    pub report: DropReport,
    pub started_log: Option<StartedLogOffset>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelOptions {
    pub trending: TrendingConfig,
}

/// Expands classified respondents into person-years.
pub fn build_quasi_panel(
    rows: &[SurveyRow],
    stats: &CityStats,
    employment: &EmploymentTable,
    options: &PanelOptions,
) -> Result<QuasiPanel, PanelError> {
    let mut report = DropReport { input_rows: rows.len(), ..Default::default() };
    let statuses: Vec<MigrantStatus> = rows.iter().map(classify).collect();

    // Final cleaning of migrants against the panel and age windows.
    let statuses: Vec<MigrantStatus> = rows
        .iter()
        .zip(statuses)
        .map(|(row, status)| match status.move_year {
            Some(year) if status.kind.is_migrant() => {
                let age = year - row.birth_year;
                if !(PANEL_YEARS.0..=PANEL_YEARS.1).contains(&year) {
                    MigrantStatus::dropped(DropReason::MoveOutsidePanel)
                } else if !(AGE_WINDOW.0..=AGE_WINDOW.1).contains(&age) {
                    MigrantStatus::dropped(DropReason::MoveOutsideAgeWindow)
                } else if row.a3139.is_some_and(|end| end <= year) {
                    MigrantStatus::dropped(DropReason::JobEndedBeforeMove)
                } else {
                    status
                }
            }
            _ => status,
        })
        .collect();

    for status in &statuses {
        *report.classified.entry(status.kind).or_default() += 1;
        if let Some(reason) = status.drop_reason {
            *report.dropped.entry(reason).or_default() += 1;
        }
    }

    let mut families: HashMap<u64, Vec<(u64, Option<i32>)>> = HashMap::new();
    for (row, status) in rows.iter().zip(&statuses) {
        let moved = status.move_year.filter(|_| status.kind.is_migrant());
        families.entry(row.family_id).or_default().push((row.person_id, moved));
    }

    let mut missing: BTreeSet<(CityId, i32)> = BTreeSet::new();
    let mut observations = Vec::new();
    let mut persons = BTreeSet::new();
    for (row, status) in rows.iter().zip(&statuses) {
        let (Some(origin), Some(destination)) = (status.origin, status.destination) else { continue };
        if status.kind == MigrantKind::Dropped {
            continue;
        }
        let native = status.kind == MigrantKind::Native;
        let sector = row.sector.unwrap_or(Sector::Total);
        let family = &families[&row.family_id];
        let first = PANEL_YEARS.0.max(row.birth_year + AGE_WINDOW.0);
        let last = PANEL_YEARS.1.min(row.birth_year + AGE_WINDOW.1);
        for year in first..=last {
            let (distance_jobtrend, distances, distance_chri) = if native {
                (0.0, [Some(0.0); 6], (year - 1 >= CHRI_STAGES[0].0).then_some(0.0))
            } else {
                let trend = |city| employment.trending(city, sector, year, &options.trending);
                let (Some(o), Some(d)) = (trend(origin), trend(destination)) else {
                    report.missing_trending_rows += 1;
                    continue;
                };
                let lag = year - 1;
                let (so, sd) = (stats.get(origin, lag), stats.get(destination, lag));
                if so.is_none() {
                    missing.insert((origin, lag));
                }
                if sd.is_none() {
                    missing.insert((destination, lag));
                }
                let (Some(so), Some(sd)) = (so, sd) else { continue };
                let (co, cd) = (so.covariates(), sd.covariates());
                let distances = std::array::from_fn(|k| cd[k].zip(co[k]).map(|(d, o)| d - o));
                let chri = stats.chri(destination, lag).zip(stats.chri(origin, lag)).map(|(d, o)| d - o);
                (d.value - o.value, distances, chri)
            };
            let age = year - row.birth_year;
            observations.push(DyadObservation {
                person_id: row.person_id,
                family_id: row.family_id,
                kind: status.kind,
                origin,
                destination,
                year,
                sector,
                migrate: status.move_year == Some(year),
                distance_jobtrend,
                distance_jobtrend_log: 0.0,
                distances,
                distance_chri,
                gender: row.gender,
                marriage: row.marriage,
                hukou_type: row.hukou_type,
                health: row.health,
                hh_income: row.hh_income,
                age,
                schooling: row.schooling_2017.map(|s| s.min(f64::from((age - 6).max(0)))),
                pioneer: pioneer_flag(family, row.person_id, year),
            });
            persons.insert(row.person_id);
        }
    }
    if !missing.is_empty() {
        return Err(CoverageError { missing: missing.into_iter().collect() }.into());
    }

    // One offset for the whole run, fitted over every trending value used.
    let mut pooled = Vec::new();
    for obs in observations.iter().filter(|o| o.kind != MigrantKind::Native) {
        for city in [obs.origin, obs.destination] {
            if let Some(t) = employment.trending(city, obs.sector, obs.year, &options.trending) {
                pooled.push(t.value);
            }
        }
    }
    let started_log = fit_started_log_offset(pooled, DEFAULT_OFFSET_EPSILON).ok();
    if let Some(offset) = started_log {
        let c = offset.c();
        for obs in observations.iter_mut().filter(|o| o.kind != MigrantKind::Native) {
            let t = |city| employment.trending(city, obs.sector, obs.year, &options.trending).map(|t| t.value);
            if let (Some(o), Some(d)) = (t(obs.origin), t(obs.destination)) {
                obs.distance_jobtrend_log = (d + c).ln() - (o + c).ln();
            }
        }
    }

    report.persons_in_panel = persons.len();
    report.output_rows = observations.len();
    Ok(QuasiPanel { observations, report, started_log })
}

impl QuasiPanel {
    /// Estimation frame. Identifiers and `sector` are categorical; missing
    /// covariates are NaN.
    pub fn to_frame(&self) -> Frame {
        let obs = &self.observations;
        let mut frame = Frame::new(obs.len());
        let cat = |f: &dyn Fn(&DyadObservation) -> i64| obs.iter().map(f).collect::<Vec<i64>>();
        frame.push_categorical("person_id", cat(&|o| o.person_id as i64));
        frame.push_categorical("family_id", cat(&|o| o.family_id as i64));
        frame.push_categorical("origin", cat(&|o| i64::from(o.origin.code())));
        frame.push_categorical("destination", cat(&|o| i64::from(o.destination.code())));
        frame.push_categorical("year", cat(&|o| i64::from(o.year)));
        frame.push_categorical("sector", cat(&|o| o.sector.code()));
        let num = |f: &dyn Fn(&DyadObservation) -> Option<f64>| {
            obs.iter().map(|o| f(o).unwrap_or(f64::NAN)).collect::<Vec<f64>>()
        };
        frame.push_numeric("migrate", num(&|o| Some(f64::from(u8::from(o.migrate)))));
        frame.push_numeric("distance_jobtrend", num(&|o| Some(o.distance_jobtrend)));
        frame.push_numeric("distance_jobtrend_log", num(&|o| Some(o.distance_jobtrend_log)));
        for (k, name) in COVARIATES.iter().enumerate() {
            frame.push_numeric(format!("distance_{name}"), num(&|o| o.distances[k]));
        }
        frame.push_numeric("distance_chri", num(&|o| o.distance_chri));
        frame.push_numeric("gender", num(&|o| o.gender));
        frame.push_numeric("marriage", num(&|o| o.marriage));
        frame.push_numeric("hukou_type", num(&|o| o.hukou_type));
        frame.push_numeric("health", num(&|o| o.health));
        frame.push_numeric("hh_income", num(&|o| o.hh_income));
        frame.push_numeric("age", num(&|o| Some(f64::from(o.age))));
        frame.push_numeric("age2", num(&|o| Some(f64::from(o.age * o.age))));
        frame.push_numeric("schooling", num(&|o| o.schooling));
        frame.push_numeric("pioneer", num(&|o| Some(f64::from(u8::from(o.pioneer)))));
        frame
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        self.to_frame()
            .write_csv(writer)
            .map_err(|e| PanelError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write_report<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        serde_json::to_writer_pretty(writer, &self.report)?;
        Ok(())
    }
}
