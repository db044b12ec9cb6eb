//! CSV loading, daily-calendar alignment and first-difference transforms.
//!
//! Raw inputs arrive at mixed frequencies (daily prices, weekly inventories,
//! monthly macro series). They are aligned onto the trading-day calendar of the
//! highest-frequency series by forward fill, then differenced column by column.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Daily,
    Weekly,
    Monthly,
}

impl Frequency {
    /// Classify by the median gap between consecutive observations.
    pub fn infer(dates: &[NaiveDate]) -> Self {
        let mut gaps: Vec<i64> = dates.windows(2).map(|w| (w[1] - w[0]).num_days()).collect();
        if gaps.is_empty() {
            return Frequency::Daily;
        }
        gaps.sort_unstable();
        match gaps[gaps.len() / 2] {
            0..=4 => Frequency::Daily,
            5..=10 => Frequency::Weekly,
            _ => Frequency::Monthly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub name: String,
    pub observations: Vec<(NaiveDate, f64)>,
    pub native_frequency: Frequency,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let name = name.into();
        if observations.len() < 2 {
            return Err(Error::invalid(format!(
                "series '{name}' has {} observations; at least 2 required",
                observations.len()
            )));
        }
        for w in observations.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(format!(
                    "series '{name}': dates not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some((d, v)) = observations.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("series '{name}': non-finite value {v} on {d}")));
        }
        let dates: Vec<NaiveDate> = observations.iter().map(|o| o.0).collect();
        let native_frequency = Frequency::infer(&dates);
        Ok(RawSeries {
            name,
            observations,
            native_frequency,
        })
    }

    pub fn first_date(&self) -> NaiveDate {
        self.observations[0].0
    }

    pub fn last_date(&self) -> NaiveDate {
        self.observations[self.observations.len() - 1].0
    }
}

/// How a panel column was derived from its level series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformTag {
    LogReturn,
    LogDiff,
    SimpleDiff,
    Level,
    /// `asinh(x_t) - asinh(x_{t-1})`; only produced when the fallback is enabled
    /// for a log-transformed column containing nonpositive levels.
    AsinhDiff,
}

impl TransformTag {
    pub fn is_log(self) -> bool {
        matches!(self, TransformTag::LogReturn | TransformTag::LogDiff)
    }
}

impl std::str::FromStr for TransformTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_return" => Ok(TransformTag::LogReturn),
            "log_diff" => Ok(TransformTag::LogDiff),
            "simple_diff" => Ok(TransformTag::SimpleDiff),
            "level" => Ok(TransformTag::Level),
            "asinh_diff" => Ok(TransformTag::AsinhDiff),
            other => Err(Error::invalid(format!("unknown transform tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelColumn {
    pub name: String,
    pub values: Vec<f64>,
    pub tag: TransformTag,
}

/// Date-indexed matrix of equally long, gap-free columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPanel {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<PanelColumn>,
}

impl AlignedPanel {
    pub fn new(dates: Vec<NaiveDate>, columns: Vec<PanelColumn>) -> Result<Self> {
        for c in &columns {
            if c.values.len() != dates.len() {
                return Err(Error::invalid(format!(
                    "column '{}' has {} rows, calendar has {}",
                    c.name,
                    c.values.len(),
                    dates.len()
                )));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("column '{}' has missing or non-finite values", c.name)));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate column '{}'", c.name)));
            }
        }
        Ok(AlignedPanel { dates, columns })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&PanelColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| Error::invalid(format!("panel has no column '{name}'")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Rows `range` as a new panel.
    pub fn slice(&self, range: std::ops::Range<usize>) -> AlignedPanel {
        AlignedPanel {
            dates: self.dates[range.clone()].to_vec(),
            columns: self
                .columns
                .iter()
                .map(|c| PanelColumn {
                    name: c.name.clone(),
                    values: c.values[range.clone()].to_vec(),
                    tag: c.tag,
                })
                .collect(),
        }
    }

    pub fn manifest(&self) -> PanelManifest {
        PanelManifest {
            rows: self.len(),
            first_date: self.dates.first().copied(),
            last_date: self.dates.last().copied(),
            columns: self
                .columns
                .iter()
                .map(|c| ManifestColumn {
                    name: c.name.clone(),
                    transform: c.tag,
                })
                .collect(),
        }
    }
}

/// Sidecar JSON written next to a panel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelManifest {
    pub rows: usize,
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
    pub columns: Vec<ManifestColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestColumn {
    pub name: String,
    pub transform: TransformTag,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Load mapped columns of a CSV file. `schema` maps CSV header names to series
/// names; an empty schema keeps every column under its header name.
pub fn load_csv(path: impl AsRef<Path>, schema: &[(String, String)]) -> Result<Vec<RawSeries>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &[(String, String)]) -> Result<Vec<RawSeries>> {
    if text.trim().is_empty() {
        return Err(Error::Empty("csv file has no content".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::invalid("csv needs a date column and at least one value column"));
    }

    // (csv column index, series name)
    let wanted: Vec<(usize, String)> = if schema.is_empty() {
        headers.iter().enumerate().skip(1).map(|(i, h)| (i, h.to_string())).collect()
    } else {
        schema
            .iter()
            .map(|(col, name)| {
                headers
                    .iter()
                    .position(|h| h == col)
                    .filter(|&i| i > 0)
                    .map(|i| (i, name.clone()))
                    .ok_or_else(|| Error::Config {
                        field: "columns".into(),
                        message: format!("csv has no column '{col}'"),
                    })
            })
            .collect::<Result<_>>()?
    };

    let mut obs: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); wanted.len()];
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let raw_date = record.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| Error::Parse {
            row,
            column: headers[0].to_string(),
            message: format!("bad date '{raw_date}': {e}"),
        })?;
        for (k, (col, _)) in wanted.iter().enumerate() {
            let cell = record.get(*col).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[*col].to_string(),
                message: format!("bad number '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[*col].to_string(),
                    message: format!("non-finite number '{cell}'"),
                });
            }
            obs[k].push((date, v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("csv file has a header but no rows".into()));
    }
    wanted
        .into_iter()
        .zip(obs)
        .map(|((_, name), o)| RawSeries::new(name, o))
        .collect()
}

/// Union of observed dates across the highest-frequency series.
pub fn daily_calendar(series: &[RawSeries]) -> Result<Vec<NaiveDate>> {
    let top = series
        .iter()
        .map(|s| s.native_frequency)
        .min()
        .ok_or_else(|| Error::Empty("no series to build a calendar from".into()))?;
    let dates: BTreeSet<NaiveDate> = series
        .iter()
        .filter(|s| s.native_frequency == top)
        .flat_map(|s| s.observations.iter().map(|o| o.0))
        .collect();
    Ok(dates.into_iter().collect())
}

/// Forward-fill every series onto `calendar`, trimming leading days before the
/// latest first observation so that no column has a gap. Columns are tagged
/// [`TransformTag::Level`].
pub fn align_daily(series: &[RawSeries], calendar: &[NaiveDate]) -> Result<AlignedPanel> {
    if calendar.is_empty() {
        return Err(Error::Empty("calendar is empty".into()));
    }
    if series.is_empty() {
        return Err(Error::Empty("no series to align".into()));
    }
    let cal_first = calendar[0];
    let cal_last = calendar[calendar.len() - 1];
    for s in series {
        if s.first_date() > cal_last || s.last_date() < cal_first {
            return Err(Error::invalid(format!(
                "series '{}' ({} to {}) does not overlap the calendar ({} to {})",
                s.name,
                s.first_date(),
                s.last_date(),
                cal_first,
                cal_last
            )));
        }
    }
    let start = series.iter().map(|s| s.first_date()).max().unwrap();
    let first_row = calendar.partition_point(|d| *d < start);
    if first_row == calendar.len() {
        return Err(Error::invalid("series share no calendar days after trimming"));
    }
    let dates = calendar[first_row..].to_vec();

    let columns = series
        .iter()
        .map(|s| {
            let mut values = Vec::with_capacity(dates.len());
            let mut k = 0usize;
            let mut last: Option<f64> = None;
            for d in &dates {
                while k < s.observations.len() && s.observations[k].0 <= *d {
                    last = Some(s.observations[k].1);
                    k += 1;
                }
                // trimming guarantees an observation on or before every date
                values.push(last.expect("trimmed calendar starts after first observation"));
            }
            PanelColumn {
                name: s.name.clone(),
                values,
                tag: TransformTag::Level,
            }
        })
        .collect();
    AlignedPanel::new(dates, columns)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOptions {
    /// Replace a log transform by the asinh difference for columns that contain
    /// nonpositive levels, instead of rejecting them.
    pub asinh_fallback: bool,
}

/// Difference every column according to its tag. The output loses the first row.
pub fn transform(
    panel: &AlignedPanel,
    tags: &[(String, TransformTag)],
    options: TransformOptions,
) -> Result<AlignedPanel> {
    if panel.len() < 2 {
        return Err(Error::invalid("transform needs at least 2 rows"));
    }
    let mut columns = Vec::with_capacity(panel.columns.len());
    for c in &panel.columns {
        let mut tag = tags
            .iter()
            .find(|(n, _)| *n == c.name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config {
                field: "transforms".into(),
                message: format!("no transform tag for column '{}'", c.name),
            })?;
        if tag.is_log() {
            if let Some(i) = c.values.iter().position(|v| *v <= 0.0) {
                if options.asinh_fallback {
                    tag = TransformTag::AsinhDiff;
                } else {
                    return Err(Error::NonPositiveLevel {
                        column: c.name.clone(),
                        date: panel.dates[i].to_string(),
                        value: c.values[i],
                    });
                }
            }
        }
        let values = c
            .values
            .windows(2)
            .map(|w| match tag {
                TransformTag::LogReturn | TransformTag::LogDiff => w[1].ln() - w[0].ln(),
                TransformTag::SimpleDiff => w[1] - w[0],
                TransformTag::Level => w[1],
                TransformTag::AsinhDiff => w[1].asinh() - w[0].asinh(),
            })
            .collect();
        columns.push(PanelColumn {
            name: c.name.clone(),
            values,
            tag,
        });
    }
    AlignedPanel::new(panel.dates[1..].to_vec(), columns)
}

/// Write `date,<col>,...` CSV and the sidecar manifest JSON.
pub fn write_panel(panel: &AlignedPanel, csv_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut out = String::from("date");
    for c in &panel.columns {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push('\n');
    for (i, d) in panel.dates.iter().enumerate() {
        out.push_str(&d.format("%Y-%m-%d").to_string());
        for c in &panel.columns {
            out.push(',');
            out.push_str(&c.values[i].to_string());
        }
        out.push('\n');
    }
    fs::write(csv_path, out).map_err(|e| io_err(csv_path, e))?;
    let manifest = serde_json::to_string_pretty(&panel.manifest()).expect("manifest serializes");
    fs::write(manifest_path, manifest).map_err(|e| io_err(manifest_path, e))
}

/// Read a panel previously written by [`write_panel`]. Without a manifest all
/// columns are tagged as levels.
pub fn read_panel(csv_path: &Path, manifest_path: Option<&Path>) -> Result<AlignedPanel> {
    let series = load_csv(csv_path, &[])?;
    let manifest: Option<PanelManifest> = match manifest_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::from_json(e, &text))?)
        }
        None => None,
    };
    let dates: Vec<NaiveDate> = series[0].observations.iter().map(|o| o.0).collect();
    let columns = series
        .into_iter()
        .map(|s| {
            if s.observations.len() != dates.len() {
                return Err(Error::invalid(format!("panel column '{}' has missing cells", s.name)));
            }
            let tag = manifest
                .as_ref()
                .and_then(|m| m.columns.iter().find(|c| c.name == s.name))
                .map(|c| c.transform)
                .unwrap_or(TransformTag::Level);
            Ok(PanelColumn {
                values: s.observations.iter().map(|o| o.1).collect(),
                name: s.name,
                tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AlignedPanel::new(dates, columns)
}
