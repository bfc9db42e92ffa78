//! CSV rendering and parsing for logs, metrics and sweeps.
//!
//! Percentages are written with two decimals. Every writer is a pure
//! function of its input, so equal inputs give byte-identical files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fault::DegradationCurve;
use crate::metrics::MetricsRecord;
use crate::train::TrainLog;

pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "recon_loss", "disc_loss", "gen_adv_loss", "cls_loss", "train_acc", "test_acc"];
pub const COMPARISON_HEADER: [&str; 7] = ["method", "arch", "seed", "train_acc", "test_acc", "gen_error", "param_std"];
pub const SWEEP_HEADER: [&str; 5] = ["fault_kind", "fraction", "trial", "seed", "test_accuracy"];
pub const SUMMARY_HEADER: [&str; 5] = ["fault_kind", "fraction", "mean_accuracy", "std_accuracy", "epsilon_max"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Schema(String),
    #[error("duplicate row for method={method} arch={arch} seed={seed}")]
    Duplicate { method: String, arch: String, seed: u64 },
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

fn render<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn train_log_csv(log: &TrainLog) -> String {
    render(
        TRAIN_LOG_HEADER,
        log.records.iter().map(|r| {
            [
                r.epoch.to_string(),
                opt(r.recon_loss, 6),
                opt(r.disc_loss, 6),
                opt(r.gen_adv_loss, 6),
                opt(r.cls_loss, 6),
                opt(r.train_acc, 2),
                opt(r.test_acc, 2),
            ]
        }),
    )
}

/// One line of the method comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub arch: String,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gen_error: f64,
    pub param_std: f64,
}

impl From<&MetricsRecord> for ComparisonRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            method: r.method.clone(),
            arch: r.arch.clone(),
            seed: r.seed,
            train_acc: r.train_accuracy,
            test_acc: r.test_accuracy,
            gen_error: r.generalization_error,
            param_std: r.param_std,
        }
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    render(
        COMPARISON_HEADER,
        rows.iter().map(|r| {
            [
                r.method.clone(),
                r.arch.clone(),
                r.seed.to_string(),
                pct(r.train_acc),
                pct(r.test_acc),
                pct(r.gen_error),
                format!("{:.6}", r.param_std),
            ]
        }),
    )
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    comparison_csv(&records.iter().map(ComparisonRow::from).collect::<Vec<_>>())
}

fn reader<'a>(text: &'a str, header: &[&str], what: &str) -> Result<csv::Reader<&'a [u8]>, ReportError> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(ReportError::Schema(format!(
            "{what}: expected columns {}, found {}",
            header.join(","),
            got.join(",")
        )));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, ReportError> {
    let raw = rec.get(i).unwrap_or_default();
    raw.parse()
        .map_err(|_| ReportError::Schema(format!("column `{name}`: cannot parse `{raw}`")))
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>, ReportError> {
    let mut r = reader(text, &COMPARISON_HEADER, "comparison")?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(ComparisonRow {
            method: field(&rec, 0, "method")?,
            arch: field(&rec, 1, "arch")?,
            seed: field(&rec, 2, "seed")?,
            train_acc: field(&rec, 3, "train_acc")?,
            test_acc: field(&rec, 4, "test_acc")?,
            gen_error: field(&rec, 5, "gen_error")?,
            param_std: field(&rec, 6, "param_std")?,
        });
    }
    Ok(rows)
}

/// Sorts rows by `(arch, method, seed)` and rejects repeated keys.
pub fn merge_comparison(mut rows: Vec<ComparisonRow>) -> Result<Vec<ComparisonRow>, ReportError> {
    let mut seen = BTreeSet::new();
    for r in &rows {
        if !seen.insert((r.arch.clone(), r.method.clone(), r.seed)) {
            return Err(ReportError::Duplicate {
                method: r.method.clone(),
                arch: r.arch.clone(),
                seed: r.seed,
            });
        }
    }
    rows.sort_by(|a, b| (&a.arch, &a.method, a.seed).cmp(&(&b.arch, &b.method, b.seed)));
    Ok(rows)
}

pub fn sweep_csv(curves: &[DegradationCurve]) -> String {
    render(
        SWEEP_HEADER,
        curves.iter().flat_map(|c| {
            c.points.iter().flat_map(move |p| {
                p.trials.iter().map(move |t| {
                    [
                        c.kind.name().to_string(),
                        p.fraction.to_string(),
                        t.trial.to_string(),
                        t.seed.to_string(),
                        pct(t.accuracy),
                    ]
                })
            })
        }),
    )
}

pub fn summary_csv(curves: &[DegradationCurve]) -> String {
    render(
        SUMMARY_HEADER,
        curves.iter().flat_map(|c| {
            c.points.iter().map(move |p| {
                [
                    c.kind.name().to_string(),
                    p.fraction.to_string(),
                    pct(p.mean_accuracy),
                    pct(p.std_accuracy),
                    format!("{:.6}", p.epsilon_max),
                ]
            })
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub fault_kind: String,
    pub fraction: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub epsilon_max: f64,
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>, ReportError> {
    let mut r = reader(text, &SUMMARY_HEADER, "summary")?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(SummaryRow {
            fault_kind: field(&rec, 0, "fault_kind")?,
            fraction: field(&rec, 1, "fraction")?,
            mean_accuracy: field(&rec, 2, "mean_accuracy")?,
            std_accuracy: field(&rec, 3, "std_accuracy")?,
            epsilon_max: field(&rec, 4, "epsilon_max")?,
        });
    }
    Ok(rows)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `comparison.csv`, `sweep.csv` and `summary.csv` into `dir`.
pub fn emit_report(records: &[MetricsRecord], curves: &[DegradationCurve], dir: &Path) -> Result<(), ReportError> {
    let rows = merge_comparison(records.iter().map(ComparisonRow::from).collect())?;
    write_file(&dir.join("comparison.csv"), &comparison_csv(&rows))?;
    write_file(&dir.join("sweep.csv"), &sweep_csv(curves))?;
    write_file(&dir.join("summary.csv"), &summary_csv(curves))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_curves_header_only() {
        assert_eq!(sweep_csv(&[]), "fault_kind,fraction,trial,seed,test_accuracy\n");
        assert_eq!(summary_csv(&[]), "fault_kind,fraction,mean_accuracy,std_accuracy,epsilon_max\n");
    }

    #[test]
    fn schema_mismatch_rejected() {
        let err = parse_comparison_csv("method,arch\nnone,a1\n").unwrap_err();
        assert!(matches!(err, ReportError::Schema(_)));
    }
}
