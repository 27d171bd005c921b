//! Parsing of data CSVs, metric files and inline vectors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use probgeo::manifold::{MetricField, MetricFieldDoc};

use crate::args::HeaderMode;
use crate::CliError;

/// Reads a numeric CSV into a `rows × columns` matrix. Row numbers in errors
/// are 1-based file lines, columns are 1-based fields.
pub fn read_csv(path: &Path, header: HeaderMode) -> Result<DMatrix<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, header).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_csv(text: &str, header: HeaderMode) -> Result<DMatrix<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (index, record) in reader.records().enumerate() {
        let line = index + 1;
        let record = record.map_err(|e| CliError::usage(format!("row {line}: {e}")))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, usize>> =
            record.iter().enumerate().map(|(c, f)| f.parse::<f64>().map_err(|_| c + 1)).collect();
        let is_first = rows.is_empty() && width.is_none();
        let skip_header = match header {
            HeaderMode::Yes => is_first,
            HeaderMode::No => false,
            HeaderMode::Auto => is_first && parsed.iter().any(|p| p.is_err()),
        };
        if skip_header {
            width = Some(record.len());
            continue;
        }
        let mut values = Vec::with_capacity(parsed.len());
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                Ok(_) => return Err(CliError::usage(format!("row {line}, column {}: non-finite value", c + 1))),
                Err(col) => {
                    return Err(CliError::usage(format!("row {line}, column {col}: cannot parse {:?} as a number", &record[col - 1])))
                }
            }
        }
        match width {
            Some(w) if w != values.len() => {
                return Err(CliError::usage(format!("row {line}: expected {w} columns, found {}", values.len())))
            }
            _ => width = Some(values.len()),
        }
        rows.push(values);
    }
    let cols = width.unwrap_or(0);
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

pub fn read_metric(path: &Path, rho: Option<f64>) -> Result<MetricField, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let doc: MetricFieldDoc =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid metric JSON: {e}", path.display())))?;
    let field = MetricField::from_doc(&doc)?;
    match rho {
        Some(r) => Ok(MetricField::new(field.components().to_vec(), r)?),
        None => Ok(field),
    }
}

pub fn parse_vector(text: &str, what: &str) -> Result<DVector<f64>, CliError> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::usage(format!("{what}: expected comma-separated numbers, got {text:?}")))?;
    if values.is_empty() {
        return Err(CliError::usage(format!("{what} is empty")));
    }
    Ok(DVector::from_vec(values))
}

/// `cov=<s>` gives `s·I`; `cov=<D² entries>` a row-major matrix.
pub fn parse_cov(text: &str, dim: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    let body = text.strip_prefix("cov=").ok_or_else(|| CliError::usage(format!("{what}: expected cov=..., got {text:?}")))?;
    let v = parse_vector(body, what)?;
    match v.len() {
        1 => Ok(DMatrix::identity(dim, dim) * v[0]),
        n if n == dim * dim => Ok(DMatrix::from_row_slice(dim, dim, v.as_slice())),
        n => Err(CliError::usage(format!("{what}: expected 1 or {} entries, got {n}", dim * dim))),
    }
}
