//! Result tables written as CSV and as aligned text.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::AGE_LABELS;
use crate::error::{Error, Result};
use crate::objectives::AgeReport;
use crate::train::ZeroShotReport;

/// One model's per-age scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub params: usize,
    pub report: AgeReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (c, cell) in cells.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{:<w$}", cell, w = widths[c]);
                } else {
                    let _ = write!(s, "  {:>w$}", cell, w = widths[c]);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

fn pct(v: f64) -> String {
    format!("{:.4}", v)
}

/// Columns: model, params(M), one per age, Avg. Rows keep the input order.
pub fn dice_table(rows: &[ResultRow]) -> Result<Table> {
    if rows.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    let mut header = vec!["model".to_string(), "params(M)".to_string()];
    header.extend(AGE_LABELS.iter().map(|s| s.to_string()));
    header.push("Avg".to_string());
    let rows = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.model.clone(), format!("{:.6}", r.params as f64 / 1e6)];
            cells.extend(r.report.per_age.iter().map(|&v| pct(v)));
            cells.push(pct(r.report.avg));
            cells
        })
        .collect();
    Ok(Table { header, rows })
}

/// Zero-shot layout: one column per `(cohort, age)` cell, then Avg. Every
/// report must cover the same cells.
pub fn zero_shot_table(rows: &[(String, ZeroShotReport)]) -> Result<Table> {
    let first = rows.first().ok_or_else(|| Error::Config("no results to report".into()))?;
    let keys: Vec<&(String, usize)> = first.1.cells.keys().collect();
    let mut header = vec!["model".to_string()];
    for (cohort, age) in &keys {
        let label = AGE_LABELS.get(*age).copied().unwrap_or("?");
        header.push(format!("{cohort} {label}"));
    }
    header.push("Avg".to_string());
    let mut out = Vec::with_capacity(rows.len());
    for (name, rep) in rows {
        if rep.cells.keys().collect::<Vec<_>>() != keys {
            return Err(Error::Config(format!("{name} covers different cohorts than {}", first.0)));
        }
        let mut cells = vec![name.clone()];
        cells.extend(rep.cells.values().map(|&v| pct(v)));
        cells.push(pct(rep.avg()));
        out.push(cells);
    }
    Ok(Table { header, rows: out })
}
