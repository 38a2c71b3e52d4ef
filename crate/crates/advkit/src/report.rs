//! Tabular experiment reports. TSV is the machine-readable source of
//! truth, with `#`-prefixed footer metadata and an optional Markdown
//! rendering. Cell formatting is fixed so identical runs serialize to
//! identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A labelled row of numeric cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub cells: Vec<f64>,
}

/// A rectangular report: one label column plus numeric columns, with
/// footer metadata (seeds, versions, parameters).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    /// Column headers, including the leading label column.
    pub headers: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub metadata: Vec<(String, String)>,
}

/// Fixed numeric cell format shared by writer and verifier.
pub fn format_cell(v: f64) -> String {
    format!("{v:.6}")
}

impl ReportTable {
    pub fn new(headers: Vec<String>) -> Self {
        Self {
            headers,
            rows: Vec::new(),
            metadata: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, cells: Vec<f64>) {
        self.rows.push(ReportRow {
            label: label.into(),
            cells,
        });
    }

    pub fn push_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.push((key.into(), value.into()));
    }

    /// Rectangularity and finiteness of every cell.
    pub fn validate(&self) -> Result<()> {
        let width = self.headers.len().saturating_sub(1);
        for row in &self.rows {
            if row.cells.len() != width {
                return Err(Error::Precondition(format!(
                    "row {:?} has {} cells, expected {width}",
                    row.label,
                    row.cells.len()
                )));
            }
            if let Some(bad) = row.cells.iter().find(|c| !c.is_finite()) {
                return Err(Error::Precondition(format!(
                    "row {:?} holds a non-finite cell {bad}",
                    row.label
                )));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.headers.join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for cell in &row.cells {
                out.push('\t');
                out.push_str(&format_cell(*cell));
            }
            out.push('\n');
        }
        for (key, value) in &self.metadata {
            let _ = writeln!(out, "# {key}\t{value}");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", self.headers.join(" | "));
        let _ = writeln!(
            out,
            "|{}|",
            self.headers.iter().map(|_| " --- ").collect::<Vec<_>>().join("|")
        );
        for row in &self.rows {
            let cells: Vec<String> = row.cells.iter().map(|c| format_cell(*c)).collect();
            let _ = writeln!(out, "| {} | {} |", row.label, cells.join(" | "));
        }
        for (key, value) in &self.metadata {
            let _ = writeln!(out, "\n_{key}: {value}_");
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        fs::write(path, self.to_tsv()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Parses a TSV produced by [`ReportTable::to_tsv`]. Numeric cells come
    /// back as the formatter wrote them.
    pub fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "empty report".into(),
            })?;
        let headers: Vec<String> = header.split('\t').map(str::to_string).collect();
        let mut table = ReportTable::new(headers);
        for (idx, line) in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                let mut parts = rest.splitn(2, '\t');
                let key = parts.next().unwrap_or("").to_string();
                let value = parts.next().unwrap_or("").to_string();
                table.metadata.push((key, value));
                continue;
            }
            let mut fields = line.split('\t');
            let label = fields.next().unwrap_or("").to_string();
            let cells: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        message: format!("bad cell {f:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            table.rows.push(ReportRow { label, cells });
        }
        Ok(table)
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_tsv(path, &text)
    }
}
