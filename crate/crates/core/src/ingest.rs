//! Parsing and repair of clinical, policy and testing feeds.
//!
//! All feeds are UTF-8 CSV with ISO-8601 dates and one row per region and
//! day. Column names are configurable through [`ColumnMap`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npi::{Npi, PolicyVector, NPI_COUNT};

/// Days modeled before the first day reporting more than one death.
pub const LEAD_DAYS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSeries {
    pub region_id: String,
    pub start_date: NaiveDate,
    pub deaths: Vec<u64>,
    pub cases: Vec<u64>,
    pub prior_cumulative_deaths: u64,
    pub population: u64,
}

impl ClinicalSeries {
    pub fn days(&self) -> usize {
        self.deaths.len()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days())
            .map(|t| self.start_date + chrono::Days::new(t as u64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySchedule {
    pub region_id: String,
    pub weeks: Vec<PolicyVector>,
}

impl PolicySchedule {
    pub fn new(region_id: impl Into<String>, weeks: Vec<PolicyVector>) -> Result<Self> {
        let s = Self {
            region_id: region_id.into(),
            weeks,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(region_id: impl Into<String>, u: PolicyVector, weeks: usize) -> Self {
        Self {
            region_id: region_id.into(),
            weeks: vec![u; weeks],
        }
    }

    pub fn len(&self) -> usize {
        self.weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weeks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (w, u) in self.weeks.iter().enumerate() {
            for (k, v) in u.iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidParameter(format!(
                        "week {w}, {}: strength {v} outside [0,1]",
                        Npi::ALL[k]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_npi_zeroed(&self, npi: Npi) -> Self {
        let mut out = self.clone();
        for u in &mut out.weeks {
            u[npi.index()] = 0.0;
        }
        out
    }

    pub fn series(&self, npi: Npi) -> Vec<f64> {
        self.weeks.iter().map(|u| u[npi.index()]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestRamp {
    /// Growth of daily tests, per million population per day.
    pub rate: f64,
    pub fit_r_squared: f64,
}

/// Header names used when reading feeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub date: String,
    pub region: String,
    pub cumulative_deaths: String,
    pub cumulative_cases: String,
    pub cumulative_tests: String,
    /// Level column and optional general/targeted flag column per NPI.
    pub policies: BTreeMap<Npi, PolicyColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyColumn {
    pub level: String,
    pub flag: Option<String>,
    pub max_level: u32,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let spec: [(Npi, &str, Option<&str>, u32); NPI_COUNT] = [
            (Npi::School, "C1_School closing", Some("C1_Flag"), 3),
            (Npi::Workplace, "C2_Workplace closing", Some("C2_Flag"), 3),
            (Npi::Events, "C3_Cancel public events", Some("C3_Flag"), 2),
            (Npi::Gatherings, "C4_Restrictions on gatherings", Some("C4_Flag"), 4),
            (Npi::Transit, "C5_Close public transport", Some("C5_Flag"), 2),
            (Npi::StayHome, "C6_Stay at home requirements", Some("C6_Flag"), 3),
            (Npi::InternalMovement, "C7_Restrictions on internal movement", Some("C7_Flag"), 2),
            (Npi::InfoCampaigns, "H1_Public information campaigns", Some("H1_Flag"), 2),
            (Npi::Testing, "H2_Testing policy", None, 3),
            (Npi::Tracing, "H3_Contact tracing", None, 2),
            (Npi::Masks, "H6_Facial Coverings", Some("H6_Flag"), 4),
        ];
        Self {
            date: "date".into(),
            region: "region".into(),
            cumulative_deaths: "deaths".into(),
            cumulative_cases: "cases".into(),
            cumulative_tests: "tests".into(),
            policies: spec
                .into_iter()
                .map(|(npi, level, flag, max_level)| {
                    (
                        npi,
                        PolicyColumn {
                            level: level.into(),
                            flag: flag.map(Into::into),
                            max_level,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl ColumnMap {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Make a cumulative series nondecreasing. Whenever a day reports less than
/// an earlier day, its cumulative value is trusted and the incidence on the
/// preceding days is set to zero back to the last day at or below it.
pub fn repair_cumulative(cumulative: &[u64]) -> Vec<u64> {
    let mut r: Vec<u64> = Vec::with_capacity(cumulative.len());
    for (t, &c) in cumulative.iter().enumerate() {
        if t > 0 && c < r[t - 1] {
            let keep = r.iter().rposition(|v| *v <= c);
            let base = keep.map(|j| r[j]).unwrap_or(0);
            let from = keep.map(|j| j + 1).unwrap_or(0);
            info!("repairing cumulative drop to {c} on row {t}: zeroing days {from}..{t}");
            for v in &mut r[from..t] {
                *v = base;
            }
        }
        r.push(c);
    }
    r
}

pub fn daily_increments(cumulative: &[u64], baseline: u64) -> Vec<u64> {
    let mut prev = baseline;
    cumulative
        .iter()
        .map(|&c| {
            let d = c.saturating_sub(prev);
            prev = c;
            d
        })
        .collect()
}

struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path, columns: &ColumnMap, region: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        let region_col = headers.iter().position(|h| *h == columns.region);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            if region_col.is_none_or(|c| rec.get(c) == Some(region)) {
                rows.push((i + 2, rec));
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyRegion {
                path: path.to_owned(),
                region: region.to_owned(),
            });
        }
        Ok(Self {
            path: path.to_owned(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            row: 1,
            message: format!("missing column '{name}'"),
        })
    }

    fn parse_err(&self, row: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            row,
            message,
        }
    }

    /// Rows sorted by date, checked for duplicates and gaps.
    fn dated(&self, date_col: &str) -> Result<Vec<(NaiveDate, usize, &csv::StringRecord)>> {
        let c = self.column(date_col)?;
        let mut out = Vec::with_capacity(self.rows.len());
        for (row, rec) in &self.rows {
            let raw = rec.get(c).unwrap_or("");
            let date = NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
                .or_else(|_| NaiveDate::parse_from_str(raw.trim(), "%Y%m%d"))
                .map_err(|_| self.parse_err(*row, format!("malformed date '{raw}'")))?;
            out.push((date, *row, rec));
        }
        out.sort_by_key(|(d, _, _)| *d);
        for w in out.windows(2) {
            let gap = (w[1].0 - w[0].0).num_days();
            if gap != 1 {
                let what = if gap == 0 { "duplicate date" } else { "gap before date" };
                return Err(self.parse_err(w[1].1, format!("{what} {}", w[1].0)));
            }
        }
        Ok(out)
    }

    fn count(&self, rec: &csv::StringRecord, col: usize, row: usize) -> Result<u64> {
        let raw = rec.get(col).unwrap_or("").trim();
        if raw.is_empty() {
            return Ok(0);
        }
        raw.parse::<f64>()
            .ok()
            .filter(|v| *v >= 0.0 && v.fract() == 0.0)
            .map(|v| v as u64)
            .ok_or_else(|| self.parse_err(row, format!("invalid count '{raw}'")))
    }
}

/// Load one region's deaths and cases, repair decreasing cumulative counts and
/// cut the modeling window.
pub fn load_clinical_series(
    path: &Path,
    region: &str,
    population: u64,
    columns: &ColumnMap,
) -> Result<ClinicalSeries> {
    if population == 0 {
        return Err(Error::InvalidParameter("population must be positive".into()));
    }
    let table = Table::read(path, columns, region)?;
    let rows = table.dated(&columns.date)?;
    let dc = table.column(&columns.cumulative_deaths)?;
    let cc = table.column(&columns.cumulative_cases)?;
    let mut cum_d = Vec::with_capacity(rows.len());
    let mut cum_c = Vec::with_capacity(rows.len());
    for (_, row, rec) in &rows {
        cum_d.push(table.count(rec, dc, *row)?);
        cum_c.push(table.count(rec, cc, *row)?);
    }
    let cum_d = repair_cumulative(&cum_d);
    let cum_c = repair_cumulative(&cum_c);
    let daily_d = daily_increments(&cum_d, 0);
    let start = window_start(&daily_d);
    if start.is_none() {
        warn!("{region}: no day reports more than one death; modeling from the first row");
    }
    let start = start.unwrap_or(0);
    let prior_d = if start > 0 { cum_d[start - 1] } else { 0 };
    let prior_c = if start > 0 { cum_c[start - 1] } else { 0 };
    Ok(ClinicalSeries {
        region_id: region.to_owned(),
        start_date: rows[start].0,
        deaths: daily_increments(&cum_d[start..], prior_d),
        cases: daily_increments(&cum_c[start..], prior_c),
        prior_cumulative_deaths: prior_d,
        population,
    })
}

/// Index of the first modeled day, or `None` if no day exceeds one death.
pub fn window_start(daily_deaths: &[u64]) -> Option<usize> {
    daily_deaths
        .iter()
        .position(|d| *d > 1)
        .map(|first| first.saturating_sub(LEAD_DAYS))
}

/// Encode one ordinal level on `[0,1]`; a targeted measure sits half a step
/// below the general one.
pub fn encode_policy_level(level: u32, max_level: u32, general: bool) -> f64 {
    if level == 0 {
        return 0.0;
    }
    let half = if general { 0.0 } else { 0.5 };
    (level as f64 - half) / max_level as f64
}

/// Read daily ordinal policy levels and average them over weeks starting at
/// `anchor`. `days` fixes the horizon; missing days carry the last value
/// forward, and days before the first observation are zero.
pub fn load_policy_schedule(
    path: &Path,
    region: &str,
    anchor: NaiveDate,
    days: usize,
    columns: &ColumnMap,
) -> Result<PolicySchedule> {
    let table = Table::read(path, columns, region)?;
    let rows = dated_rows_allowing_gaps(&table, &columns.date)?;
    let mut daily: BTreeMap<NaiveDate, [Option<f64>; NPI_COUNT]> = BTreeMap::new();
    for (date, row, rec) in &rows {
        let mut u = [None; NPI_COUNT];
        for (npi, col) in &columns.policies {
            let lc = table.column(&col.level)?;
            let raw = rec.get(lc).unwrap_or("").trim();
            if raw.is_empty() {
                continue;
            }
            let level = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= col.max_level as f64)
                .ok_or_else(|| Error::UnknownPolicyLevel {
                    path: path.to_owned(),
                    row: *row,
                    indicator: col.level.clone(),
                    level: raw.to_owned(),
                })? as u32;
            let general = match &col.flag {
                None => true,
                Some(f) => {
                    let fc = table.column(f)?;
                    match rec.get(fc).unwrap_or("").trim() {
                        "" | "1" | "1.0" => true,
                        "0" | "0.0" => false,
                        other => {
                            return Err(Error::UnknownPolicyLevel {
                                path: path.to_owned(),
                                row: *row,
                                indicator: f.clone(),
                                level: other.to_owned(),
                            })
                        }
                    }
                }
            };
            u[npi.index()] = Some(encode_policy_level(level, col.max_level, general));
        }
        daily.insert(*date, u);
    }
    fn carry(current: &mut PolicyVector, u: &[Option<f64>; NPI_COUNT]) {
        for (c, v) in current.iter_mut().zip(u) {
            if let Some(v) = v {
                *c = *v;
            }
        }
    }
    let mut current = [0.0; NPI_COUNT];
    for u in daily.range(..anchor).map(|(_, u)| u) {
        carry(&mut current, u);
    }
    let mut per_day = Vec::with_capacity(days);
    for t in 0..days {
        if let Some(u) = daily.get(&(anchor + chrono::Days::new(t as u64))) {
            carry(&mut current, u);
        }
        per_day.push(current);
    }
    Ok(PolicySchedule {
        region_id: region.to_owned(),
        weeks: weekly_means(&per_day),
    })
}

fn dated_rows_allowing_gaps<'a>(
    table: &'a Table,
    date_col: &str,
) -> Result<Vec<(NaiveDate, usize, &'a csv::StringRecord)>> {
    let c = table.column(date_col)?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (row, rec) in &table.rows {
        let raw = rec.get(c).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .or_else(|_| NaiveDate::parse_from_str(raw, "%Y%m%d"))
            .map_err(|_| table.parse_err(*row, format!("malformed date '{raw}'")))?;
        out.push((date, *row, rec));
    }
    out.sort_by_key(|(d, _, _)| *d);
    Ok(out)
}

/// Average daily vectors over consecutive 7-day blocks; a trailing partial
/// block is averaged over its own length.
pub fn weekly_means(daily: &[PolicyVector]) -> Vec<PolicyVector> {
    daily
        .chunks(7)
        .map(|chunk| {
            let mut w = [0.0; NPI_COUNT];
            for u in chunk {
                for k in 0..NPI_COUNT {
                    w[k] += u[k];
                }
            }
            w.map(|v| v / chunk.len() as f64)
        })
        .collect()
}

pub fn load_test_series(path: &Path, region: &str, columns: &ColumnMap) -> Result<Vec<u64>> {
    let table = Table::read(path, columns, region)?;
    let rows = table.dated(&columns.date)?;
    let c = table.column(&columns.cumulative_tests)?;
    let mut cum = Vec::with_capacity(rows.len());
    for (_, row, rec) in &rows {
        cum.push(table.count(rec, c, *row)?);
    }
    Ok(repair_cumulative(&cum))
}

/// Fit cumulative tests by a quadratic in time; the daily test count then
/// grows by twice the leading coefficient per day.
pub fn estimate_test_ramp(cumulative_tests: &[u64], population: f64) -> Result<TestRamp> {
    if cumulative_tests.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "test ramp needs at least 10 observations, got {}",
            cumulative_tests.len()
        )));
    }
    let repaired = repair_cumulative(cumulative_tests);
    let n = repaired.len();
    let x = DMatrix::from_fn(n, 3, |i, j| (i as f64).powi(2 - j as i32));
    let y = DVector::from_iterator(n, repaired.iter().map(|v| *v as f64));
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidParameter(format!("test ramp fit failed: {e}")))?;
    let fitted = &x * &coef;
    let ybar = y.mean();
    let ss_res: f64 = (&y - fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    let rate = 2.0 * coef[0] * 1e6 / population;
    if !(rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "fitted testing ramp {rate} is not positive"
        )));
    }
    if r2 < 0.97 {
        warn!("quadratic test-ramp fit has R^2 = {r2:.3} < 0.97");
    }
    Ok(TestRamp {
        rate,
        fit_r_squared: r2,
    })
}
