//! Minimal CSV writer for numeric tables (17 significant digits).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Renders a table given its header and rows of equal length.
pub fn to_string(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{}", format_value(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    std::fs::write(path, to_string(header, rows))?;
    Ok(())
}

/// Parses a table written by [`to_string`].
pub fn parse(text: &str) -> Option<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let row: Option<Vec<f64>> = line.split(',').map(|s| s.parse().ok()).collect();
        rows.push(row?);
    }
    Some((header, rows))
}
