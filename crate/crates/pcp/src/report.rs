//! CSV and markdown renderings of experiment summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::SummaryRow;

pub const COLUMNS: [&str; 8] = ["task", "method", "mode", "mean", "std", "delta", "seeds", "failed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

/// Shortest decimal that parses back to the same value.
fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::Necessary).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.method.clone(),
            r.mode.clone(),
            num(r.mean),
            num(r.std),
            num(r.delta),
            r.seeds.to_string(),
            r.failed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}

pub fn from_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Data(format!("unexpected report columns {headers:?}")));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("`{s}` is not a number")))
        }
    };
    let count = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Data(format!("`{s}` is not a count"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(SummaryRow {
            task: rec[0].to_string(),
            method: rec[1].to_string(),
            mode: rec[2].to_string(),
            mean: opt(&rec[3])?,
            std: opt(&rec[4])?,
            delta: opt(&rec[5])?,
            seeds: count(&rec[6])?,
            failed: count(&rec[7])?,
        });
    }
    Ok(rows)
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// One header row, one separator and one row per summary entry. Scores
/// are shown in percent; deltas are signed.
pub fn to_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| task | method | mode | mean | std | delta | seeds | failed |\n");
    s.push_str("|---|---|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let delta = r
            .delta
            .map(|d| format!("{:+.1}", 100.0 * d))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            md_cell(&r.task),
            md_cell(&r.method),
            md_cell(&r.mode),
            pct(r.mean),
            pct(r.std),
            delta,
            r.seeds,
            r.failed
        ));
    }
    s
}

pub fn emit_report(rows: &[SummaryRow], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => to_csv(rows)?,
        ReportFormat::Markdown => to_markdown(rows),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
