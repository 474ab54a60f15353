use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ExperimentReport, TrialSeeds};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Unsupported(format!("report format {s:?}"))),
        }
    }
}

/// One sweep cell. Failed cells carry the error text.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub budget: usize,
    pub ratio: f64,
    pub seeds: TrialSeeds,
    pub result: std::result::Result<ExperimentReport, String>,
}

pub const CSV_HEADER: [&str; 16] = [
    "dataset",
    "attack",
    "victim",
    "budget",
    "ratio",
    "split_seed",
    "attack_seed",
    "victim_seed",
    "original_accuracy",
    "unlearned_accuracy",
    "delta_acc",
    "original_f1",
    "unlearned_f1",
    "benign_f1",
    "diverged",
    "error",
];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_record(row: &SweepRow) -> Vec<String> {
    let s = row.seeds;
    let mut rec = vec![String::new(); 3];
    rec.extend([
        row.budget.to_string(),
        fixed(row.ratio),
        s.split.to_string(),
        s.attack.to_string(),
        s.victim.to_string(),
    ]);
    match &row.result {
        Ok(r) => {
            rec[0] = r.dataset.clone();
            rec[1] = r.attack.to_string();
            rec[2] = r.victim.arch().to_string();
            // delta is taken from the rounded columns so the file is self-consistent
            let orig: f64 = fixed(r.original_accuracy).parse().unwrap_or(f64::NAN);
            let unl: f64 = fixed(r.unlearned_accuracy).parse().unwrap_or(f64::NAN);
            rec.extend([
                fixed(orig),
                fixed(unl),
                fixed(orig - unl),
                fixed(r.original_f1),
                fixed(r.unlearned_f1),
                fixed(r.benign_f1),
                r.diverged.to_string(),
                String::new(),
            ]);
        }
        Err(e) => {
            rec.extend(std::iter::repeat_n(String::new(), 7));
            rec.push(e.clone());
        }
    }
    rec
}

/// Writes sweep rows as CSV with six-decimal floats.
pub fn write_csv(rows: &[SweepRow], writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::invalid(format!("csv output: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(csv_record(row)).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Reports as a pretty JSON array or as CSV rows.
pub fn render_report(reports: &[ExperimentReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)? + "\n"),
        ReportFormat::Csv => {
            let rows: Vec<SweepRow> = reports
                .iter()
                .map(|r| SweepRow {
                    budget: r.config.attack.budget,
                    ratio: r.config.attack.m_fraction,
                    seeds: r.seeds,
                    result: Ok(r.clone()),
                })
                .collect();
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
        }
    }
}

pub fn write_report(reports: &[ExperimentReport], path: &Path, format: ReportFormat) -> Result<()> {
    fs::write(path, render_report(reports, format)?).map_err(|e| Error::io(path, e))
}

/// Reads a JSON report file written by [`write_report`].
pub fn read_report(path: &Path) -> Result<Vec<ExperimentReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
