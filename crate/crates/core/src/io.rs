//! CSV ingestion, income binarization, and output files with JSON sidecars.
//!
//! Floats are written with Rust's shortest round-trip representation, so a
//! written file reloads bit-exactly. Loaders reject malformed or non-finite
//! values instead of coercing them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::area::AreaId;
use crate::error::{Error, Result};
use crate::predict::{AreaEstimate, CensusFrame};
use crate::simulation::MetricsTable;

/// Column holding area labels in every input file.
pub const AREA_COLUMN: &str = "area_id";
/// Column mapping areas to districts in aggregation files.
pub const DISTRICT_COLUMN: &str = "district_id";

/// Poverty line rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSpec {
    /// Fixed line `t`.
    Literal(f64),
    /// `t = fraction × median(income)`.
    MedianFraction(f64),
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::MedianFraction(0.6)
    }
}

impl ThresholdSpec {
    /// Parse `0.6*median`, `median*0.6` or a plain number (`inf` allowed).
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim().replace(' ', "");
        let bad = || Error::InvalidInput(format!("cannot parse threshold {text:?}"));
        if let Some(f) = t.strip_suffix("*median").or_else(|| t.strip_prefix("median*")) {
            let f: f64 = f.parse().map_err(|_| bad())?;
            if !f.is_finite() || f < 0.0 {
                return Err(bad());
            }
            return Ok(ThresholdSpec::MedianFraction(f));
        }
        let v: f64 = t.parse().map_err(|_| bad())?;
        if v.is_nan() {
            return Err(bad());
        }
        Ok(ThresholdSpec::Literal(v))
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `y = 1` iff income ≤ t. Returns the indicators and the resolved `t`.
pub fn binarize_income(income: &[f64], spec: ThresholdSpec) -> Result<(Vec<u8>, f64)> {
    if income.is_empty() {
        return Err(Error::InsufficientData("no incomes to binarize".into()));
    }
    if let Some(i) = income.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("income at row {i} is not finite")));
    }
    let t = match spec {
        ThresholdSpec::Literal(t) if t.is_nan() => {
            return Err(Error::InvalidInput("threshold is NaN".into()))
        }
        ThresholdSpec::Literal(t) => t,
        ThresholdSpec::MedianFraction(f) => f * median(income),
    };
    Ok((income.iter().map(|&z| u8::from(z <= t)).collect(), t))
}

/// Survey units with binary responses.
#[derive(Clone, Debug)]
pub struct SurveyData {
    pub area: Vec<AreaId>,
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    /// Covariate names in column order of `x`.
    pub covariates: Vec<String>,
    /// Resolved poverty line when `y` came from an income column.
    pub threshold: Option<f64>,
}

/// Census covariates with their column names.
#[derive(Clone, Debug)]
pub struct CensusData {
    pub frame: CensusFrame,
    pub covariates: Vec<String>,
}

struct Table {
    path: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse { path: name.clone(), message: e.to_string() })?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse { path: name.clone(), message: e.to_string() })?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if !seen.insert(h) {
                return Err(Error::Schema(format!("{name}: duplicate column `{h}`")));
            }
        }
        let rows = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: name.clone(), message: e.to_string() })?;
        Ok(Table { path: name, headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", self.path)))
    }

    fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn covariates(&self) -> Vec<String> {
        self.headers.iter().filter(|h| h.starts_with('x')).cloned().collect()
    }

    fn err(&self, row: usize, column: &str, message: impl std::fmt::Display) -> Error {
        // Row numbers count the header as line 1.
        Error::Parse { path: self.path.clone(), message: format!("line {}, column `{column}`: {message}", row + 2) }
    }

    fn text(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }

    fn area(&self, row: usize, col: usize) -> Result<AreaId> {
        let v = self.text(row, col);
        if v.is_empty() {
            return Err(self.err(row, AREA_COLUMN, "empty area id"));
        }
        Ok(AreaId::from(v))
    }

    fn finite(&self, row: usize, col: usize) -> Result<f64> {
        let v = self.text(row, col);
        let name = &self.headers[col];
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            Ok(_) => Err(self.err(row, name, format!("non-finite value {v:?}"))),
            Err(_) => Err(self.err(row, name, format!("expected a number, found {v:?}"))),
        }
    }

    fn matrix(&self, covariates: &[String]) -> Result<Array2<f64>> {
        let cols = covariates.iter().map(|c| self.column(c)).collect::<Result<Vec<_>>>()?;
        let mut x = Array2::zeros((self.rows.len(), cols.len()));
        for r in 0..self.rows.len() {
            for (j, &c) in cols.iter().enumerate() {
                x[[r, j]] = self.finite(r, c)?;
            }
        }
        Ok(x)
    }

    fn areas(&self) -> Result<Vec<AreaId>> {
        let c = self.column(AREA_COLUMN)?;
        (0..self.rows.len()).map(|r| self.area(r, c)).collect()
    }
}

/// Load a survey CSV with `area_id`, covariates `x*`, and either `y` (0/1) or `income`.
///
/// `threshold` applies when only `income` is present; it defaults to 0.6 × median.
pub fn load_survey(path: &Path, threshold: Option<ThresholdSpec>) -> Result<SurveyData> {
    let table = Table::read(path)?;
    let area = table.areas()?;
    let covariates = table.covariates();
    if covariates.is_empty() {
        return Err(Error::Schema(format!("{}: no covariate columns (names starting with `x`)", table.path)));
    }
    if table.rows.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no survey rows", table.path)));
    }
    let x = table.matrix(&covariates)?;
    let (y, threshold) = if table.has("y") {
        let c = table.column("y")?;
        let y = (0..table.rows.len())
            .map(|r| match table.text(r, c) {
                "0" => Ok(0),
                "1" => Ok(1),
                v => Err(table.err(r, "y", format!("expected 0 or 1, found {v:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        (y, None)
    } else if table.has("income") {
        let c = table.column("income")?;
        let income = (0..table.rows.len()).map(|r| table.finite(r, c)).collect::<Result<Vec<_>>>()?;
        let (y, t) = binarize_income(&income, threshold.unwrap_or_default())?;
        (y, Some(t))
    } else {
        return Err(Error::Schema(format!("{}: missing column `y` (or `income`)", table.path)));
    };
    Ok(SurveyData { area, x, y, covariates, threshold })
}

/// Load a census CSV. With `covariates` given, those columns are read in that
/// order and each must be present.
pub fn load_census(path: &Path, covariates: Option<&[String]>) -> Result<CensusData> {
    let table = Table::read(path)?;
    let area = table.areas()?;
    let covariates = match covariates {
        Some(c) => c.to_vec(),
        None => table.covariates(),
    };
    if covariates.is_empty() {
        return Err(Error::Schema(format!("{}: no covariate columns (names starting with `x`)", table.path)));
    }
    if table.rows.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no census rows", table.path)));
    }
    let x = table.matrix(&covariates)?;
    Ok(CensusData { frame: CensusFrame::new(&area, x)?, covariates })
}

/// Every survey area must have census rows.
pub fn check_survey_areas(survey: &SurveyData, census: &CensusData) -> Result<()> {
    let present: BTreeSet<&AreaId> = census.frame.area_ids().iter().collect();
    let missing: BTreeSet<&AreaId> = survey.area.iter().filter(|a| !present.contains(a)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        let list: Vec<&str> = missing.iter().map(|a| a.as_str()).collect();
        Err(Error::Schema(format!("survey areas absent from census: {}", list.join(", "))))
    }
}

/// Load an `area_id,district_id` mapping.
pub fn load_mapping(path: &Path) -> Result<BTreeMap<AreaId, AreaId>> {
    let table = Table::read(path)?;
    let a = table.column(AREA_COLUMN)?;
    let d = table.column(DISTRICT_COLUMN)?;
    let mut out = BTreeMap::new();
    for r in 0..table.rows.len() {
        let area = table.area(r, a)?;
        let district = table.text(r, d);
        if district.is_empty() {
            return Err(table.err(r, DISTRICT_COLUMN, "empty district id"));
        }
        if out.insert(area.clone(), AreaId::from(district)).is_some() {
            return Err(table.err(r, AREA_COLUMN, format!("area {area} mapped twice")));
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const ESTIMATE_HEADER: [&str; 8] = ["area_id", "n_i", "N_i", "in_sample", "mu_hat", "mse", "cv", "flags"];

/// Write `estimates.csv` (flags joined by `;`, absent values as empty fields).
pub fn write_estimates(path: &Path, estimates: &[AreaEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ESTIMATE_HEADER)?;
    for e in estimates {
        w.write_record([
            e.area.as_str().to_owned(),
            e.n_i.to_string(),
            e.big_n_i.to_string(),
            e.in_sample.to_string(),
            e.mu_hat.to_string(),
            opt(e.mse),
            opt(e.cv),
            e.flags.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read an estimates file written by [`write_estimates`].
pub fn read_estimates(path: &Path) -> Result<Vec<AreaEstimate>> {
    let table = Table::read(path)?;
    let cols = ESTIMATE_HEADER.iter().map(|c| table.column(c)).collect::<Result<Vec<_>>>()?;
    let count = |r: usize, c: usize| -> Result<usize> {
        table.text(r, c).parse().map_err(|_| table.err(r, &table.headers[c], "expected a count"))
    };
    let optional = |r: usize, c: usize| -> Result<Option<f64>> {
        if table.text(r, c).is_empty() {
            Ok(None)
        } else {
            table.finite(r, c).map(Some)
        }
    };
    (0..table.rows.len())
        .map(|r| {
            let in_sample = match table.text(r, cols[3]) {
                "true" => true,
                "false" => false,
                v => return Err(table.err(r, "in_sample", format!("expected true or false, found {v:?}"))),
            };
            let flags = table.text(r, cols[7]);
            Ok(AreaEstimate {
                area: table.area(r, cols[0])?,
                n_i: count(r, cols[1])?,
                big_n_i: count(r, cols[2])?,
                in_sample,
                mu_hat: table.finite(r, cols[4])?,
                mse: optional(r, cols[5])?,
                cv: optional(r, cols[6])?,
                flags: if flags.is_empty() { Vec::new() } else { flags.split(';').map(str::to_owned).collect() },
            })
        })
        .collect()
}

/// Write `report.csv`: one row per method and area.
pub fn write_report(path: &Path, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "method", "area_id", "rb", "rrmse", "rb_rmse", "rrmse_rmse"])?;
    for m in &table.methods {
        for a in &m.areas {
            w.write_record([
                table.scenario.clone(),
                m.method.clone(),
                a.area.as_str().to_owned(),
                a.rb.to_string(),
                a.rrmse.to_string(),
                opt(a.rb_rmse),
                opt(a.rrmse_rmse),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run metadata stored next to every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub seed: u64,
    pub version: String,
    /// Everything needed to replay the run.
    pub config: serde_json::Value,
    /// Additional results (summaries, resolved thresholds, fit traces).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub results: serde_json::Value,
}

impl Sidecar {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Sidecar {
            command: command.to_owned(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            results: serde_json::Value::Null,
        }
    }
}

/// Sidecar path for an output file: `name.csv` → `name.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

pub fn write_sidecar(output: &Path, sidecar: &Sidecar) -> Result<()> {
    let file = File::create(sidecar_path(output))?;
    serde_json::to_writer_pretty(file, sidecar)?;
    Ok(())
}

pub fn read_sidecar(output: &Path) -> Result<Sidecar> {
    let file = File::open(sidecar_path(output))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
