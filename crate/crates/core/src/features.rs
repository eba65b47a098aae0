//! Covariate preprocessing: raw per-(trap, week) tables to fixed-order
//! numeric feature vectors.
//!
//! Column order of the assembled matrix:
//!
//! | block | columns |
//! |-------|---------|
//! | canopy one-hot | `canopy_low`, `canopy_medium`, `canopy_high` |
//! | imperviousness one-hot | `impervious_low`, `impervious_medium`, `impervious_high` |
//! | land cover (> 15 %) | `lc_<class>` in input order |
//! | roads (> 10 %) | `road_primary`, `road_secondary`, `road_tertiary`, `road_nonroad` |
//! | temperature quantiles | `temp_q10` … `temp_q90` |
//! | degree days | `heating_degree_days`, `cooling_degree_days` |
//! | pass-through | `precip_total_mm` (when precipitation is present), `x_<name>` |
//!
//! The last three blocks are continuous and standardized with statistics
//! from training rows only.
//!
//! Degree days follow the source data convention rather than HVAC usage:
//! a *heating* day has a mean above 65 °F and a *cooling* day a mean
//! below it.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::stats::quantiles;

pub const SCALER_FORMAT_VERSION: u32 = 1;
pub const TEMPERATURE_LEVELS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];
pub const DEGREE_DAY_BASE_F: f64 = 65.0;
pub const LANDCOVER_THRESHOLD: f64 = 0.15;
pub const ROAD_THRESHOLD: f64 = 0.10;
pub const ROAD_CLASSES: [&str; 4] = ["primary", "secondary", "tertiary", "nonroad"];

const KEY_COLUMNS: [&str; 5] = ["trap_id", "lat", "lon", "week", "label"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Level::Low => [1.0, 0.0, 0.0],
            Level::Medium => [0.0, 1.0, 0.0],
            Level::High => [0.0, 0.0, 1.0],
        }
    }
}

fn bin_percentage(what: &str, pct: f64, low_below: f64, high_above: f64) -> Result<Level> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Data(format!("{what} {pct} outside [0, 100]")));
    }
    Ok(if pct < low_below {
        Level::Low
    } else if pct <= high_above {
        Level::Medium
    } else {
        Level::High
    })
}

/// `< 20` low, `[20, 50]` medium, `> 50` high.
pub fn bin_canopy(pct: f64) -> Result<Level> {
    bin_percentage("canopy_pct", pct, 20.0, 50.0)
}

/// `< 33` low, `[33, 67]` medium, `> 67` high.
pub fn bin_imperviousness(pct: f64) -> Result<Level> {
    bin_percentage("impervious_pct", pct, 33.0, 67.0)
}

pub fn landcover_indicators(fractions: &[f64]) -> Vec<f64> {
    fractions
        .iter()
        .map(|&f| if f > LANDCOVER_THRESHOLD { 1.0 } else { 0.0 })
        .collect()
}

/// Indicators for primary, secondary, tertiary and non-road impervious surface.
pub fn road_indicators(fractions: [f64; 4]) -> [f64; 4] {
    fractions.map(|f| if f > ROAD_THRESHOLD { 1.0 } else { 0.0 })
}

/// 10th, 25th, 50th, 75th and 90th percentiles of the daily means.
pub fn temperature_quantiles(daily_means: &[f64]) -> Result<[f64; 5]> {
    let q = quantiles(daily_means, &TEMPERATURE_LEVELS)
        .ok_or_else(|| Error::Data("empty temperature window".into()))?;
    Ok([q[0], q[1], q[2], q[3], q[4]])
}

/// `(heating_days, cooling_days)`: days with mean strictly above / below
/// 65 °F. Days at exactly 65 °F count as neither.
pub fn degree_day_counts(daily_means: &[f64]) -> Result<(u32, u32)> {
    if daily_means.is_empty() {
        return Err(Error::Data("empty temperature window".into()));
    }
    let heating = daily_means
        .iter()
        .filter(|&&t| t > DEGREE_DAY_BASE_F)
        .count() as u32;
    let cooling = daily_means
        .iter()
        .filter(|&&t| t < DEGREE_DAY_BASE_F)
        .count() as u32;
    Ok((heating, cooling))
}

/// One raw input row.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCovariates {
    pub trap_id: String,
    pub position: GeoPoint,
    pub week: u32,
    pub label: Option<bool>,
    pub canopy_pct: f64,
    pub impervious_pct: f64,
    pub landcover: Vec<f64>,
    pub roads: [f64; 4],
    pub daily_temp_f: Vec<f64>,
    pub daily_precip_mm: Vec<f64>,
    pub extra: Vec<f64>,
}

impl RawCovariates {
    fn validate(&self) -> std::result::Result<(), String> {
        let mut problems = Vec::new();
        if !(0.0..=100.0).contains(&self.canopy_pct) {
            problems.push(format!("canopy_pct {} outside [0, 100]", self.canopy_pct));
        }
        if !(0.0..=100.0).contains(&self.impervious_pct) {
            problems.push(format!(
                "impervious_pct {} outside [0, 100]",
                self.impervious_pct
            ));
        }
        for (i, f) in self.landcover.iter().chain(&self.roads).enumerate() {
            if !(0.0..=1.0).contains(f) {
                problems.push(format!("fraction #{i} = {f} outside [0, 1]"));
            }
        }
        if self.daily_temp_f.is_empty() {
            problems.push("empty temperature window".into());
        }
        for v in self
            .daily_temp_f
            .iter()
            .chain(&self.daily_precip_mm)
            .chain(&self.extra)
        {
            if !v.is_finite() {
                problems.push(format!("non-finite covariate {v}"));
                break;
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// A validated raw covariate table.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub landcover_classes: Vec<String>,
    pub extra_names: Vec<String>,
    pub temp_days: usize,
    pub precip_days: usize,
    pub rows: Vec<RawCovariates>,
}

fn parse_f64(field: &str, name: &str) -> std::result::Result<f64, String> {
    if field.trim().is_empty() {
        return Err(format!("missing value for {name}"));
    }
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("{name}: cannot parse {field:?}"))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("{name}: non-finite value {field:?}"))
            }
        })
}

pub fn parse_label(field: &str) -> std::result::Result<Option<bool>, String> {
    match field.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(format!("label {other:?} is not 0, 1 or blank")),
    }
}

struct Layout {
    idx: HashMap<String, usize>,
    landcover: Vec<(String, usize)>,
    temps: Vec<usize>,
    precips: Vec<usize>,
    extras: Vec<(String, usize)>,
}

impl Layout {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let mut idx = HashMap::new();
        let mut landcover = Vec::new();
        let mut temps = Vec::new();
        let mut precips = Vec::new();
        let mut extras = Vec::new();
        let mut problems = Vec::new();
        for (i, name) in header.iter().enumerate() {
            if idx.insert(name.to_string(), i).is_some() {
                problems.push(format!("duplicate column {name:?}"));
            }
            if let Some(class) = name.strip_prefix("lc_") {
                landcover.push((class.to_string(), i));
            } else if name.starts_with("tmean_") {
                temps.push(i);
            } else if name.starts_with("precip_") {
                precips.push(i);
            } else if let Some(x) = name.strip_prefix("x_") {
                extras.push((x.to_string(), i));
            } else if !(KEY_COLUMNS.contains(&name)
                || name == "canopy_pct"
                || name == "impervious_pct"
                || ROAD_CLASSES.iter().any(|r| name == format!("road_{r}")))
            {
                problems.push(format!("unknown column {name:?}"));
            }
        }
        let mut required: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
        required.push("canopy_pct".into());
        required.push("impervious_pct".into());
        required.extend(ROAD_CLASSES.iter().map(|r| format!("road_{r}")));
        for r in required {
            if !idx.contains_key(&r) {
                problems.push(format!("missing required column {r:?}"));
            }
        }
        if temps.is_empty() {
            problems.push("no tmean_* temperature columns".into());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(
                problems
                    .into_iter()
                    .map(|p| format!("header: {p}"))
                    .collect(),
            ));
        }
        Ok(Self {
            idx,
            landcover,
            temps,
            precips,
            extras,
        })
    }

    fn parse_row(&self, rec: &csv::StringRecord) -> std::result::Result<RawCovariates, String> {
        let get = |name: &str| rec.get(self.idx[name]).unwrap_or("");
        let num = |name: &str| parse_f64(get(name), name);
        let trap_id = get("trap_id").trim().to_string();
        if trap_id.is_empty() {
            return Err("missing trap_id".into());
        }
        let lat = num("lat")?;
        let lon = num("lon")?;
        let position = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
        let week = get("week")
            .trim()
            .parse::<u32>()
            .map_err(|_| format!("week {:?} is not a nonnegative integer", get("week")))?;
        let label = parse_label(get("label"))?;
        let at = |i: usize, name: &str| parse_f64(rec.get(i).unwrap_or(""), name);
        let row = RawCovariates {
            trap_id,
            position,
            week,
            label,
            canopy_pct: num("canopy_pct")?,
            impervious_pct: num("impervious_pct")?,
            landcover: self
                .landcover
                .iter()
                .map(|(c, i)| at(*i, &format!("lc_{c}")))
                .collect::<std::result::Result<_, _>>()?,
            roads: [
                num("road_primary")?,
                num("road_secondary")?,
                num("road_tertiary")?,
                num("road_nonroad")?,
            ],
            daily_temp_f: self
                .temps
                .iter()
                .map(|&i| at(i, "tmean"))
                .collect::<std::result::Result<_, _>>()?,
            daily_precip_mm: self
                .precips
                .iter()
                .map(|&i| at(i, "precip"))
                .collect::<std::result::Result<_, _>>()?,
            extra: self
                .extras
                .iter()
                .map(|(x, i)| at(*i, &format!("x_{x}")))
                .collect::<std::result::Result<_, _>>()?,
        };
        row.validate()?;
        Ok(row)
    }
}

impl RawTable {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
        h.push("canopy_pct".into());
        h.push("impervious_pct".into());
        h.extend(self.landcover_classes.iter().map(|c| format!("lc_{c}")));
        h.extend(ROAD_CLASSES.iter().map(|r| format!("road_{r}")));
        h.extend((1..=self.temp_days).map(|d| format!("tmean_{d}")));
        h.extend((1..=self.precip_days).map(|d| format!("precip_{d}")));
        h.extend(self.extra_names.iter().map(|x| format!("x_{x}")));
        h
    }

    /// Parses and validates a raw CSV, reporting every invalid row.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let layout = Layout::from_header(&header)?;
        let mut rows = Vec::new();
        let mut problems = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            match rec {
                Ok(rec) => match layout.parse_row(&rec) {
                    Ok(row) => rows.push(row),
                    Err(p) => problems.push(format!(
                        "row {} (line {line}, trap {:?}): {p}",
                        i + 1,
                        rec.get(layout.idx["trap_id"]).unwrap_or("")
                    )),
                },
                Err(e) => problems.push(format!("row {} (line {line}): {e}", i + 1)),
            }
        }
        problems.extend(consistency_problems(&rows));
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            landcover_classes: layout.landcover.into_iter().map(|(c, _)| c).collect(),
            extra_names: layout.extras.into_iter().map(|(x, _)| x).collect(),
            temp_days: layout.temps.len(),
            precip_days: layout.precips.len(),
            rows,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.trap_id.clone(),
                fmt_f64(r.position.lat()),
                fmt_f64(r.position.lon()),
                r.week.to_string(),
                fmt_label(r.label),
                fmt_f64(r.canopy_pct),
                fmt_f64(r.impervious_pct),
            ];
            rec.extend(r.landcover.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.roads.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.daily_temp_f.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.daily_precip_mm.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.extra.iter().map(|v| fmt_f64(*v)));
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Cross-row checks: one position per trap, distinct positions across
/// traps, one row per (trap, week).
fn consistency_problems(rows: &[RawCovariates]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut position_of: HashMap<&str, (f64, f64)> = HashMap::new();
    let mut owner_of: HashMap<(u64, u64), &str> = HashMap::new();
    let mut seen = HashSet::new();
    for (i, r) in rows.iter().enumerate() {
        let p = (r.position.lat(), r.position.lon());
        match position_of.get(r.trap_id.as_str()) {
            Some(&q) if q != p => problems.push(format!(
                "trap {:?} (week {}): coordinates {p:?} differ from earlier {q:?}",
                r.trap_id, r.week
            )),
            Some(_) => {}
            None => {
                position_of.insert(&r.trap_id, p);
                let key = (p.0.to_bits(), p.1.to_bits());
                if let Some(other) = owner_of.insert(key, &r.trap_id) {
                    problems.push(format!(
                        "trap {:?} duplicates the coordinates of trap {other:?}",
                        r.trap_id
                    ));
                }
            }
        }
        if !seen.insert((r.trap_id.as_str(), r.week)) {
            problems.push(format!(
                "row {}: duplicate entry for trap {:?} week {}",
                i + 1,
                r.trap_id,
                r.week
            ));
        }
    }
    problems
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn fmt_label(l: Option<bool>) -> String {
    match l {
        None => String::new(),
        Some(true) => "1".into(),
        Some(false) => "0".into(),
    }
}

/// Column names for a raw table's schema, in assembly order.
pub fn feature_columns(table: &RawTable) -> Vec<String> {
    let mut cols: Vec<String> = ["canopy", "impervious"]
        .iter()
        .flat_map(|v| {
            ["low", "medium", "high"]
                .iter()
                .map(move |l| format!("{v}_{l}"))
        })
        .collect();
    cols.extend(table.landcover_classes.iter().map(|c| format!("lc_{c}")));
    cols.extend(ROAD_CLASSES.iter().map(|r| format!("road_{r}")));
    cols.extend(["temp_q10", "temp_q25", "temp_q50", "temp_q75", "temp_q90"].map(String::from));
    cols.push("heating_degree_days".into());
    cols.push("cooling_degree_days".into());
    if table.precip_days > 0 {
        cols.push("precip_total_mm".into());
    }
    cols.extend(table.extra_names.iter().map(|x| format!("x_{x}")));
    cols
}

/// Whether a feature column is standardized (as opposed to a 0/1 indicator).
pub fn is_continuous_column(name: &str) -> bool {
    name.starts_with("temp_q")
        || name.ends_with("_degree_days")
        || name == "precip_total_mm"
        || name.starts_with("x_")
}

fn raw_feature_row(r: &RawCovariates) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(24 + r.landcover.len() + r.extra.len());
    v.extend(bin_canopy(r.canopy_pct)?.one_hot());
    v.extend(bin_imperviousness(r.impervious_pct)?.one_hot());
    v.extend(landcover_indicators(&r.landcover));
    v.extend(road_indicators(r.roads));
    v.extend(temperature_quantiles(&r.daily_temp_f)?);
    let (h, c) = degree_day_counts(&r.daily_temp_f)?;
    v.push(f64::from(h));
    v.push(f64::from(c));
    if !r.daily_precip_mm.is_empty() {
        v.push(r.daily_precip_mm.iter().sum());
    }
    v.extend(&r.extra);
    Ok(v)
}

/// Per-column `(mean, std)` for the continuous columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub columns: Vec<ScalerColumn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalerColumn {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    /// Fits on `rows` (already raw feature vectors); columns whose name is
    /// not continuous are skipped. Constant columns get `std = 1`.
    pub fn fit(column_names: &[String], rows: &[&[f64]]) -> Self {
        let columns = column_names
            .iter()
            .enumerate()
            .filter(|(_, n)| is_continuous_column(n))
            .map(|(j, name)| {
                let vals: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let (mean, std) = if vals.is_empty() {
                    (0.0, 1.0)
                } else {
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                    let s = var.sqrt();
                    (m, if s > 0.0 { s } else { 1.0 })
                };
                ScalerColumn {
                    name: name.clone(),
                    mean,
                    std,
                }
            })
            .collect();
        Self { columns }
    }

    pub fn apply(&self, column_names: &[String], row: &mut [f64]) -> Result<()> {
        for c in &self.columns {
            let j = column_names
                .iter()
                .position(|n| *n == c.name)
                .ok_or_else(|| {
                    Error::Data(format!("scaler column {:?} not in feature schema", c.name))
                })?;
            row[j] = (row[j] - c.mean) / c.std;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format_version={SCALER_FORMAT_VERSION}\ncolumn,mean,std\n");
        for c in &self.columns {
            s.push_str(&format!("{},{},{}\n", c.name, c.mean, c.std));
        }
        s
    }

    pub fn from_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = || -> Result<Option<String>> {
            lines
                .next()
                .transpose()
                .map_err(|e| Error::io("<scaler>", e))
        };
        let first = next()?.unwrap_or_default();
        if first.trim() != format!("format_version={SCALER_FORMAT_VERSION}") {
            return Err(Error::Parse(format!("unsupported scaler header {first:?}")));
        }
        if next()?.as_deref().map(str::trim) != Some("column,mean,std") {
            return Err(Error::Parse("scaler file missing column header".into()));
        }
        let mut columns = Vec::new();
        while let Some(line) = next()? {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("bad scaler line {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number {s:?} in scaler")))
            };
            columns.push(ScalerColumn {
                name: parts[0].to_string(),
                mean: num(parts[1])?,
                std: num(parts[2])?,
            });
        }
        Ok(Self { columns })
    }
}

/// Identifying columns carried alongside every feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowKey {
    pub trap_id: String,
    pub week: u32,
    pub position: GeoPoint,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    pub keys: Vec<RowKey>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.column_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Indicator (non-standardized) columns, used for covariate grouping.
    pub fn indicator_columns(&self) -> Vec<(usize, &str)> {
        self.column_names
            .iter()
            .enumerate()
            .filter(|(_, n)| !is_continuous_column(n))
            .map(|(j, n)| (j, n.as_str()))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        for (k, r) in self.keys.iter().zip(&self.rows) {
            let mut rec = vec![
                k.trap_id.clone(),
                fmt_f64(k.position.lat()),
                fmt_f64(k.position.lon()),
                k.week.to_string(),
                fmt_label(k.label),
            ];
            rec.extend(r.iter().map(|v| fmt_f64(*v)));
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < KEY_COLUMNS.len()
            || header
                .iter()
                .take(KEY_COLUMNS.len())
                .ne(KEY_COLUMNS.iter().copied())
        {
            return Err(Error::Parse(format!(
                "feature file must start with columns {}",
                KEY_COLUMNS.join(",")
            )));
        }
        let column_names: Vec<String> = header
            .iter()
            .skip(KEY_COLUMNS.len())
            .map(String::from)
            .collect();
        let mut keys = Vec::new();
        let mut rows = Vec::new();
        let mut problems = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed = (|| -> std::result::Result<(RowKey, Vec<f64>), String> {
                let lat = parse_f64(&rec[1], "lat")?;
                let lon = parse_f64(&rec[2], "lon")?;
                let key = RowKey {
                    trap_id: rec[0].to_string(),
                    position: GeoPoint::new(lat, lon).map_err(|e| e.to_string())?,
                    week: rec[3]
                        .parse()
                        .map_err(|_| format!("bad week {:?}", &rec[3]))?,
                    label: parse_label(&rec[4])?,
                };
                let vals = column_names
                    .iter()
                    .enumerate()
                    .map(|(j, n)| parse_f64(&rec[KEY_COLUMNS.len() + j], n))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok((key, vals))
            })();
            match parsed {
                Ok((k, v)) => {
                    keys.push(k);
                    rows.push(v);
                }
                Err(p) => problems.push(format!("row {}: {p}", i + 1)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            column_names,
            keys,
            rows,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// Builds the feature matrix. Continuous columns are standardized with
/// statistics fitted on the rows whose week satisfies `is_training_week`.
pub fn assemble_features(
    table: &RawTable,
    is_training_week: impl Fn(u32) -> bool,
) -> Result<(FeatureMatrix, Scaler)> {
    let column_names = feature_columns(table);
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut problems = Vec::new();
    for (i, r) in table.rows.iter().enumerate() {
        match raw_feature_row(r) {
            Ok(v) => rows.push(v),
            Err(e) => problems.push(format!(
                "row {} (trap {:?}, week {}): {e}",
                i + 1,
                r.trap_id,
                r.week
            )),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let train: Vec<&[f64]> = table
        .rows
        .iter()
        .zip(&rows)
        .filter(|(r, _)| is_training_week(r.week))
        .map(|(_, v)| v.as_slice())
        .collect();
    let scaler = Scaler::fit(&column_names, &train);
    for row in &mut rows {
        scaler.apply(&column_names, row)?;
    }
    let keys = table
        .rows
        .iter()
        .map(|r| RowKey {
            trap_id: r.trap_id.clone(),
            week: r.week,
            position: r.position,
            label: r.label,
        })
        .collect();
    Ok((
        FeatureMatrix {
            column_names,
            keys,
            rows,
        },
        scaler,
    ))
}
