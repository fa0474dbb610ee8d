//! The report document and its flat CSV companion.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqint_core::simgen::{McReport, StepCell};
use seqint_core::SequenceResult;

use crate::config::{Format, RunConfig};
use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "seqint-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub software_version: String,
    /// Present only when timestamps were requested, so that default reports
    /// are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub n: usize,
    pub covariates: Vec<String>,
    pub known_propensity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "result", rename_all = "lowercase")]
pub enum ReportBody {
    Test(SequenceResult),
    Simulate(McReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    pub provenance: Provenance,
    /// The resolved configuration, minus fields that cannot change results.
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSummary>,
    pub body: ReportBody,
}

impl ReportDocument {
    pub fn new(config: &RunConfig, input: Option<InputSummary>, body: ReportBody) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            provenance: Provenance {
                config_hash: config.hash(),
                seed: config.seed,
                software_version: env!("CARGO_PKG_VERSION").to_string(),
                created_unix: None,
                elapsed_seconds: None,
                workers: None,
            },
            config: config.semantic(),
            input,
            body,
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Serialize(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Serialize(e.to_string()))
    }

    /// Flat table: one row per step for a test, one row per method and step
    /// for a study.
    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| CliError::Serialize(e.to_string());
        match &self.body {
            ReportBody::Test(res) => {
                w.write_record([
                    "step", "covariate", "name", "coef", "stat_scaled", "method", "r_hat", "m_hat", "p_value", "decision",
                ])
                .map_err(ser)?;
                for s in &res.steps {
                    let c = &s.calibration;
                    w.write_record([
                        s.step_index.to_string(),
                        s.covariate.to_string(),
                        s.name.clone(),
                        s.coef.to_string(),
                        s.stat_scaled.to_string(),
                        c.method.label().to_string(),
                        c.r_hat.to_string(),
                        c.m_hat.to_string(),
                        c.p_value.to_string(),
                        decision_label(s.decision).to_string(),
                    ])
                    .map_err(ser)?;
                }
            }
            ReportBody::Simulate(rep) => {
                let mut header = vec!["method".to_string(), "step".into(), "reached".into()];
                for what in ["power", "null", "selection"] {
                    for part in ["count", "total", "rate", "se"] {
                        header.push(format!("{what}_{part}"));
                    }
                }
                w.write_record(&header).map_err(ser)?;
                for t in &rep.tables {
                    for row in &t.steps {
                        let mut rec = vec![t.method.label().to_string(), row.step.to_string(), row.reached.to_string()];
                        for cell in [&row.power, &row.null, &row.selection] {
                            rec.extend(cell_fields(cell));
                        }
                        w.write_record(&rec).map_err(ser)?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| CliError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Serialize(e.to_string()))
    }

    /// Writes the primary file at `out` in `format` and the other format
    /// next to it, each via a temporary file and an atomic rename. Returns
    /// the paths written, primary first.
    pub fn write(&self, out: &Path, format: Format) -> CliResult<(PathBuf, PathBuf)> {
        let (json, csv) = (self.to_json()?, self.to_csv()?);
        let (primary, companion) = match format {
            Format::Json => (json, csv),
            Format::Csv => (csv, json),
        };
        let other = companion_path(out, format);
        atomic_write(out, primary.as_bytes())?;
        atomic_write(&other, companion.as_bytes())?;
        Ok((out.to_path_buf(), other))
    }
}

fn decision_label(d: seqint_core::sequential::Decision) -> &'static str {
    match d {
        seqint_core::sequential::Decision::Rejected => "rejected",
        seqint_core::sequential::Decision::AcceptedNull => "accepted-null",
    }
}

fn cell_fields(c: &StepCell) -> [String; 4] {
    let (rate, se) = c
        .rate
        .map(|r| (r.rate.to_string(), r.se.to_string()))
        .unwrap_or_default();
    [c.count.to_string(), c.total.to_string(), rate, se]
}

/// `out` with the extension of the other format.
pub fn companion_path(out: &Path, format: Format) -> PathBuf {
    out.with_extension(match format {
        Format::Json => "csv",
        Format::Csv => "json",
    })
}

fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqint_core::{run_sequence, Dataset, SequenceConfig};

    fn small_report() -> ReportDocument {
        let n = 80;
        let x = seqint_core::nalgebra::DMatrix::from_fn(n, 3, |i, j| (((i * 7 + j * 13) % 17) as f64 - 8.0) / 5.0);
        let a: Vec<f64> = (0..n).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * a[i] + ((i * 11) % 7) as f64 / 7.0).collect();
        let names = vec!["x1".into(), "x2".into(), "x3".into()];
        let d = Dataset::new(y, a, x, Some(vec![0.5; n]), names).unwrap();
        let mut cfg = RunConfig::default();
        cfg.bootstrap.b = 100;
        cfg.data.path = Some("data.csv".into());
        let seq = SequenceConfig::new(cfg.recipe(), cfg.method, cfg.plan(), 2);
        let res = run_sequence(&d, &seq).unwrap();
        ReportDocument::new(
            &cfg,
            Some(InputSummary {
                rows_read: n,
                rows_dropped: 0,
                n,
                covariates: d.names().to_vec(),
                known_propensity: true,
            }),
            ReportBody::Test(res),
        )
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let doc = small_report();
        let text = doc.to_json().unwrap();
        let back = ReportDocument::from_json(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.contains("\"schema\": \"seqint-report/1\""));
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let doc = small_report();
        let ReportBody::Test(res) = &doc.body else { unreachable!() };
        let csv = doc.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + res.steps.len());
        assert!(csv.starts_with("step,covariate,name,coef"));
    }

    #[test]
    fn writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        let (p, c) = small_report().write(&out, Format::Csv).unwrap();
        assert_eq!(c, dir.path().join("r.json"));
        assert!(std::fs::read_to_string(p).unwrap().starts_with("step,"));
        assert!(std::fs::read_to_string(c).unwrap().starts_with('{'));
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 2);
    }
}
