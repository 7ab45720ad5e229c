//! File formats: dense matrix CSV (first line `m,n`, then `m` rows), margin and
//! potential JSON, versioned experiment configs and numeric tables. Floats in
//! CSV are written with 17 significant digits.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{Gauge, MarginPair, Potentials};

/// Version accepted in the `schema_version` field of config files.
pub const SCHEMA_VERSION: u64 = 1;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn parse_num<T: std::str::FromStr>(s: &str, line: u64) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {s:?}")))
}

pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut records = reader(text).into_records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?
        .map_err(csv_err)?;
    if header.len() != 2 {
        return Err(Error::Parse(format!(
            "first line must be \"m,n\", got {} fields",
            header.len()
        )));
    }
    let m: usize = parse_num(&header[0], 1)?;
    let n: usize = parse_num(&header[1], 1)?;
    let mut data = Vec::with_capacity(m * n);
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n {
            return Err(Error::Parse(format!(
                "line {line}: expected {n} entries, got {}",
                rec.len()
            )));
        }
        for field in rec.iter() {
            data.push(parse_num::<f64>(field, line)?);
        }
        rows += 1;
    }
    if rows != m {
        return Err(Error::Parse(format!("header declares {m} rows, found {rows}")));
    }
    Ok(DMatrix::from_row_slice(m, n, &data))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(&fs::read_to_string(path)?)
}

pub fn format_matrix_csv(a: &DMatrix<f64>) -> String {
    let mut out = format!("{},{}\n", a.nrows(), a.ncols());
    for row in a.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, a: &DMatrix<f64>) -> Result<()> {
    Ok(fs::write(path, format_matrix_csv(a))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginsFile {
    pub r: Vec<f64>,
    pub c: Vec<f64>,
}

impl MarginsFile {
    pub fn into_margins(self) -> Result<MarginPair> {
        MarginPair::new(DVector::from_vec(self.r), DVector::from_vec(self.c))
    }
}

pub fn read_margins_json(path: &Path) -> Result<MarginPair> {
    let file: MarginsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.into_margins()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialsFile {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gauge: Gauge,
}

impl From<&Potentials> for PotentialsFile {
    fn from(p: &Potentials) -> Self {
        Self {
            alpha: p.alpha.iter().copied().collect(),
            beta: p.beta.iter().copied().collect(),
            gauge: p.gauge,
        }
    }
}

impl From<PotentialsFile> for Potentials {
    fn from(p: PotentialsFile) -> Self {
        Self {
            alpha: DVector::from_vec(p.alpha),
            beta: DVector::from_vec(p.beta),
            gauge: p.gauge,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

/// Parses a config object carrying `"schema_version": 1`; the remaining
/// fields go to `T`, which is expected to reject unknown keys.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Parse("config must be a JSON object".into()))?;
    match obj.remove("schema_version").map(|v| v.as_u64()) {
        Some(Some(SCHEMA_VERSION)) => {}
        Some(_) => {
            return Err(Error::Parse(format!(
                "unsupported schema_version, expected {SCHEMA_VERSION}"
            )))
        }
        None => return Err(Error::Parse("config is missing schema_version".into())),
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_config(&fs::read_to_string(path)?)
}

/// Serializes `config` with `schema_version` prepended.
pub fn config_json<T: Serialize>(config: &T) -> Result<String> {
    let mut obj = serde_json::Map::new();
    obj.insert("schema_version".into(), SCHEMA_VERSION.into());
    match serde_json::to_value(config)? {
        serde_json::Value::Object(fields) => obj.extend(fields),
        _ => return Err(Error::InvalidArgument("config must serialize to an object".into())),
    }
    Ok(serde_json::to_string_pretty(&serde_json::Value::Object(obj))? + "\n")
}

/// A numeric table written as CSV with a header row.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(headers: &[S]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Columns of equal length, side by side.
    pub fn from_columns<S: AsRef<str>>(headers: &[S], columns: &[&[f64]]) -> Result<Self> {
        let len = columns.first().map_or(0, |c| c.len());
        if headers.len() != columns.len() || columns.iter().any(|c| c.len() != len) {
            return Err(Error::DimensionMismatch("table columns".into()));
        }
        let mut t = Self::new(headers);
        t.rows = (0..len).map(|k| columns.iter().map(|c| c[k]).collect()).collect();
        Ok(t)
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|&v| fmt_f64(v))).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_csv()?)?)
    }
}

pub fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}
