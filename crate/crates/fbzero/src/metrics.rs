//! In-memory metrics table with deterministic CSV serialization.
//!
//! Values render through Rust's shortest-roundtrip float formatting, so a
//! written log parses back to bitwise-identical f64s; missing cells (e.g.
//! eval columns on update rows) are empty fields that read back as NaN.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row has {got} cells, table has {want} columns")]
    RowWidth { got: usize, want: usize },
    #[error("csv line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvLog {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl CsvLog {
    pub fn new(columns: &[&str]) -> Self {
        CsvLog { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<(), MetricsError> {
        if row.len() != self.columns.len() {
            return Err(MetricsError::RowWidth { got: row.len(), want: self.columns.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    /// Column values by header name.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { String::new() } else { format!("{v}") })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Atomic write (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_csv())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(MetricsError::Parse { line: 1, detail: "empty file".into() })?;
        let columns: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(MetricsError::Parse {
                    line: i + 1,
                    detail: format!("{} cells, expected {}", cells.len(), columns.len()),
                });
            }
            let row: Vec<f64> = cells
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        c.parse::<f64>().map_err(|e| MetricsError::Parse {
                            line: i + 1,
                            detail: e.to_string(),
                        })
                    }
                })
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        Ok(CsvLog { columns, rows })
    }

    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
