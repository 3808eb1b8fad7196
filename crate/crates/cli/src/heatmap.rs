//! Plain-text matrix and table files.
//!
//! A heatmap file starts with `rows cols min max` and then holds one line
//! per matrix row. Values are written in the shortest form that parses
//! back to the same `f64`, so files round-trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use xagent_core::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum HeatmapError {
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("matrix is empty")]
    Empty,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn format_heatmap(m: &Matrix) -> Result<String, HeatmapError> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(HeatmapError::Empty);
    }
    if let Some(i) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(HeatmapError::NonFinite { row: i / m.cols(), col: i % m.cols() });
    }
    let mut out = format!("{} {} {} {}\n", m.rows(), m.cols(), format_value(m.min()), format_value(m.max()));
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| format_value(v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

pub fn emit_heatmap(m: &Matrix, path: &Path) -> Result<(), HeatmapError> {
    let text = format_heatmap(m)?;
    write_file(path, &text)
}

pub fn parse_heatmap(text: &str) -> Result<Matrix, HeatmapError> {
    let bad = |s: String| HeatmapError::Malformed(s);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("missing header".into()))?.split_whitespace().collect();
    if header.len() != 4 {
        return Err(bad(format!("header has {} fields, expected 4", header.len())));
    }
    let rows: usize = header[0].parse().map_err(|_| bad(format!("row count `{}`", header[0])))?;
    let cols: usize = header[1].parse().map_err(|_| bad(format!("column count `{}`", header[1])))?;
    let mut data = Vec::with_capacity(rows * cols);
    for (r, line) in lines.by_ref().take(rows).enumerate() {
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| bad(format!("row {r}: value `{tok}`")))?);
        }
        if data.len() - before != cols {
            return Err(bad(format!("row {r} has {} values, expected {cols}", data.len() - before)));
        }
    }
    if data.len() != rows * cols {
        return Err(bad(format!("expected {rows} rows")));
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing content".into()));
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| bad(e.to_string()))
}

pub fn read_heatmap(path: &Path) -> Result<Matrix, HeatmapError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| HeatmapError::Read { path: path.display().to_string(), source })?;
    parse_heatmap(&text)
}

/// Named columns of equal length, one whitespace-separated line per row
/// under a header of column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn render(&self) -> String {
        let mut out = self.columns.join(" ");
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Table, HeatmapError> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| HeatmapError::Malformed("missing header".into()))?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HeatmapError::Malformed(format!("row {i}: {e}")))?;
            if row.len() != columns.len() {
                return Err(HeatmapError::Malformed(format!("row {i} has {} values", row.len())));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), HeatmapError> {
        write_file(path, &self.render())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), HeatmapError> {
    let err = |source| HeatmapError::Write { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    std::fs::write(path, text).map_err(err)
}
