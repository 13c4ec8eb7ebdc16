use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::commands::resolve_run_dir;
use super::manifest::RunManifest;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, Strategy};
use crate::train::TrainingHistory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub architecture: String,
    /// Final-epoch training accuracy; absent for a zero-epoch run.
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub strategy: Strategy,
    pub rows: Vec<ReportRow>,
}

pub const COLUMNS: [&str; 7] = [
    "Run",
    "Architecture",
    "Training Accuracy",
    "Test Accuracy",
    "Precision",
    "F1 Score",
    "Recall",
];

fn artifact<'a>(m: &'a RunManifest, field: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| Error::Data(format!("run {} has no {what}; run `evaluate` first", m.run_id)))
}

/// Reads one row per run. Every artifact a manifest references must exist.
pub fn build_report(run_dirs: &[PathBuf], strategy: Strategy) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run".into()));
    }
    let rows = run_dirs
        .iter()
        .map(|dir| {
            let dir = resolve_run_dir(dir);
            let m = RunManifest::load(&dir)?;
            m.check_artifacts(&dir)?;
            let metrics = MetricsReport::load(&dir.join(artifact(&m, &m.artifacts.metrics, "metrics")?))?;
            let history = TrainingHistory::load_json(&dir.join(artifact(&m, &m.artifacts.history, "history")?))?;
            let agg = metrics.aggregate(strategy);
            Ok(ReportRow {
                run_id: m.run_id.clone(),
                architecture: m
                    .backbone
                    .as_ref()
                    .map(|b| b.architecture.to_string())
                    .unwrap_or_default(),
                train_accuracy: history.last().map(|e| e.train_accuracy),
                test_accuracy: metrics.accuracy,
                precision: agg.precision,
                f1: agg.f1,
                recall: agg.recall,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReportTable { strategy, rows })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl ReportTable {
    /// Percentages with two decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} |", COLUMNS.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(COLUMNS.len()));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.run_id,
                r.architecture,
                r.train_accuracy.map(pct).unwrap_or_else(|| "n/a".into()),
                pct(r.test_accuracy),
                pct(r.precision),
                pct(r.f1),
                pct(r.recall)
            );
        }
        let _ = writeln!(s, "\nPrecision, F1 and recall are {}-averaged.", self.strategy);
        s
    }

    /// Unrounded fractions, one row per run.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, strategy: Strategy) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let rows = r
            .deserialize()
            .map(|row| row.map_err(|e| Error::format(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { strategy, rows })
    }

    pub fn write_markdown(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}
