//! CSV formats: features, labels, long-format power readings.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use capriv::dataset::{FeatureMatrix, LabelSet};
use capriv::powerfeat::PowerSeries;
use chrono::NaiveDateTime;
use nalgebra::{DMatrix, DVector};

use crate::CliError;

fn input_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn io_err(path: &Path, e: impl Into<std::io::Error>) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            _ => unreachable!(),
        }
    } else {
        input_err(path, e.to_string())
    }
}

/// Header and row-major numeric body of a CSV file.
fn read_numeric(path: &Path) -> Result<(Vec<String>, DMatrix<f64>), CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(input_err(path, "missing header row"));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| input_err(path, format!("row {}, column `{}`: `{field}` is not a number", i + 1, header[j])))?;
            if !v.is_finite() {
                return Err(input_err(path, format!("row {}, column `{}`: non-finite value", i + 1, header[j])));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(input_err(path, "no data rows"));
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, CliError> {
    let (header, values) = read_numeric(path)?;
    FeatureMatrix::with_names(values, header).map_err(|e| input_err(path, e.to_string()))
}

/// `label` (binary ±1) or `y1..yd` (continuous).
pub fn read_labels(path: &Path) -> Result<LabelSet, CliError> {
    let (header, values) = read_numeric(path)?;
    if header == ["label"] {
        let v = DVector::from_iterator(values.nrows(), values.column(0).iter().copied());
        return LabelSet::binary(v).map_err(|e| input_err(path, e.to_string()));
    }
    let expected: Vec<String> = (1..=header.len()).map(|j| format!("y{j}")).collect();
    if header != expected {
        return Err(input_err(
            path,
            format!("label header must be `label` or `y1..yd`, got `{}`", header.join(",")),
        ));
    }
    LabelSet::continuous(values).map_err(|e| input_err(path, e.to_string()))
}

fn write_rows<'a>(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>> + 'a) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_features(path: &Path, x: &FeatureMatrix) -> Result<(), CliError> {
    let m = x.values();
    write_rows(
        path,
        &x.names_or_default(),
        (0..m.nrows()).map(|i| m.row(i).iter().map(|&v| fmt_f64(v)).collect()),
    )
}

pub fn write_labels(path: &Path, y: &LabelSet) -> Result<(), CliError> {
    match y {
        LabelSet::Binary(v) => write_rows(
            path,
            &["label".to_string()],
            v.iter().map(|&l| vec![if l > 0.0 { "1" } else { "-1" }.to_string()]),
        ),
        LabelSet::Continuous(m) => {
            let header: Vec<String> = (1..=m.ncols()).map(|j| format!("y{j}")).collect();
            write_rows(path, &header, (0..m.nrows()).map(|i| m.row(i).iter().map(|&v| fmt_f64(v)).collect()))
        }
    }
}

const TIMESTAMP_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// One series per household from `household_id,timestamp,kw` rows, sorted by id.
pub fn read_power(path: &Path) -> Result<Vec<PowerSeries>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if header != ["household_id", "timestamp", "kw"] {
        return Err(input_err(path, format!("expected header `household_id,timestamp,kw`, got `{}`", header.join(","))));
    }
    let mut groups: BTreeMap<String, Vec<(NaiveDateTime, f64)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let ts = parse_timestamp(&rec[1]).ok_or_else(|| input_err(path, format!("row {}: bad timestamp `{}`", i + 1, &rec[1])))?;
        let kw: f64 = rec[2].parse().map_err(|_| input_err(path, format!("row {}: bad kw `{}`", i + 1, &rec[2])))?;
        groups.entry(rec[0].to_string()).or_default().push((ts, kw));
    }
    if groups.is_empty() {
        return Err(input_err(path, "no data rows"));
    }
    groups
        .into_iter()
        .map(|(id, rows)| PowerSeries::from_records(id, rows).map_err(|e| input_err(path, e.to_string())))
        .collect()
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<(), CliError> {
    write_rows(path, &["household_id".to_string()], ids.iter().map(|id| vec![id.clone()]))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Rows of the sweep CSV.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    write_rows(path, &header, rows.iter().cloned())
}
