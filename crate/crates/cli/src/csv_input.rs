//! Reading a dataset from a CSV file with named column bindings.

use std::path::Path;

use seqint_core::nalgebra::DMatrix;
use seqint_core::Dataset;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bindings {
    pub outcome: String,
    pub treatment: String,
    /// Known propensity column, if any.
    pub propensity: Option<String>,
    /// Covariates to use; `None` means every other column.
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Rows skipped because a bound field was empty.
    pub dropped: usize,
    pub rows_read: usize,
}

enum Cell {
    Value(f64),
    Missing,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> CliResult<Cell> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(Cell::Missing);
    }
    s.parse::<f64>().map(Cell::Value).map_err(|_| CliError::NonNumericCell {
        row,
        column: column.to_string(),
        value: s.to_string(),
    })
}

fn parse_treatment(raw: &str, row: usize) -> CliResult<Cell> {
    match raw.trim() {
        "" => Ok(Cell::Missing),
        "0" => Ok(Cell::Value(0.0)),
        "1" => Ok(Cell::Value(1.0)),
        other => Err(CliError::TreatmentLiteral {
            row,
            value: other.to_string(),
        }),
    }
}

/// Parses the bound columns of a header-led, comma-separated file. Rows are
/// numbered from 1 after the header.
pub fn load_csv(path: &Path, bindings: &Bindings, drop_incomplete: bool) -> CliResult<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, bindings, drop_incomplete)
}

pub fn read_csv<R: std::io::Read>(input: R, bindings: &Bindings, drop_incomplete: bool) -> CliResult<Loaded> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let index = |name: &str| -> CliResult<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    };
    let yi = index(&bindings.outcome)?;
    let ai = index(&bindings.treatment)?;
    let qi = bindings.propensity.as_deref().map(index).transpose()?;
    let names: Vec<String> = match &bindings.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != yi && *i != ai && Some(*i) != qi)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let xi: Vec<usize> = names.iter().map(|n| index(n)).collect::<CliResult<_>>()?;

    let (mut y, mut a, mut q, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;
    let mut rows_read = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::Csv(e.to_string()))?;
        rows_read += 1;
        let get = |i: usize| record.get(i).unwrap_or("");
        let mut cells = vec![
            (bindings.outcome.as_str(), parse_cell(get(yi), row, &bindings.outcome)?),
            (bindings.treatment.as_str(), parse_treatment(get(ai), row)?),
        ];
        if let (Some(qi), Some(name)) = (qi, bindings.propensity.as_deref()) {
            cells.push((name, parse_cell(get(qi), row, name)?));
        }
        for (&i, name) in xi.iter().zip(&names) {
            cells.push((name.as_str(), parse_cell(get(i), row, name)?));
        }
        if let Some((column, _)) = cells.iter().find(|(_, c)| matches!(c, Cell::Missing)) {
            if drop_incomplete {
                dropped += 1;
                continue;
            }
            return Err(CliError::MissingValue {
                row,
                column: column.to_string(),
            });
        }
        let mut values = cells.into_iter().map(|(_, c)| match c {
            Cell::Value(v) => v,
            Cell::Missing => unreachable!("missing cells were handled above"),
        });
        y.push(values.next().unwrap_or_default());
        a.push(values.next().unwrap_or_default());
        if qi.is_some() {
            q.push(values.next().unwrap_or_default());
        }
        x.push(values.collect::<Vec<f64>>());
    }
    let n = y.len();
    let p = names.len();
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let dataset = Dataset::new(y, a, xm, qi.map(|_| q), names)?;
    Ok(Loaded {
        dataset,
        dropped,
        rows_read,
    })
}
