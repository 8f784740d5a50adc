//! Per-iteration run records and their CSV encoding.
//!
//! The CSV layout is fixed: optional `#`-prefixed comment lines, one header
//! row, then one row per record. Floats are written with Rust's shortest
//! round-trip formatting, so parsing a trace back reproduces it exactly and
//! reruns can be compared byte for byte. Quantities that were not tracked
//! appear as empty fields.

use std::fmt::Write as _;

use thiserror::Error;

use crate::solver::SolverForm;

/// The one and only column layout.
pub const CSV_HEADER: &str =
    "iter,rel_sq_error,consensus_residual,objective,fixed_point_residual,lyapunov,elapsed_ms";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("expected header line '{CSV_HEADER}', found '{0}'")]
    BadHeader(String),
    #[error("line {line}: bad value for {field}: '{value}'")]
    BadField { line: usize, field: &'static str, value: String },
    #[error("line {line}: expected 7 fields, found {found}")]
    BadShape { line: usize, found: usize },
}

/// One measured iteration. `rel_sq_error` needs a known minimizer,
/// `lyapunov` needs fixed-point tracking, `elapsed_ms` is opt-in (it is the
/// one nondeterministic column, so it stays empty unless timing is
/// requested).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub rel_sq_error: Option<f64>,
    pub consensus_residual: f64,
    pub objective: f64,
    pub fixed_point_residual: f64,
    pub lyapunov: Option<f64>,
    pub elapsed_ms: Option<f64>,
}

/// A full run history plus free-form comment lines (certificates, settings)
/// carried into the CSV as `#` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub form: Option<SolverForm>,
    pub comments: Vec<String>,
    pub records: Vec<TraceRecord>,
}

fn write_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

impl IterationTrace {
    pub fn new(form: SolverForm) -> Self {
        Self { form: Some(form), comments: Vec::new(), records: Vec::new() }
    }

    /// Final recorded relative squared error, when tracked.
    pub fn final_rel_sq_error(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.rel_sq_error)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if let Some(form) = self.form {
            let _ = writeln!(out, "# form: {form}");
        }
        for comment in &self.comments {
            let _ = writeln!(out, "# {comment}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},", r.iter);
            write_opt(&mut out, r.rel_sq_error);
            let _ = write!(
                out,
                ",{},{},{},",
                r.consensus_residual, r.objective, r.fixed_point_residual
            );
            write_opt(&mut out, r.lyapunov);
            out.push(',');
            write_opt(&mut out, r.elapsed_ms);
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TraceError> {
        let mut form = None;
        let mut comments = Vec::new();
        let mut records = Vec::new();
        let mut header_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim_start();
                if let Some(name) = comment.strip_prefix("form: ") {
                    form = Some(name.parse().map_err(|_| TraceError::BadField {
                        line: line_no,
                        field: "form",
                        value: name.to_string(),
                    })?);
                } else {
                    comments.push(comment.to_string());
                }
                continue;
            }
            if !header_seen {
                if line != CSV_HEADER {
                    return Err(TraceError::BadHeader(line.to_string()));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(TraceError::BadShape { line: line_no, found: fields.len() });
            }
            let required = |field: &'static str, value: &str| -> Result<f64, TraceError> {
                value.parse().map_err(|_| TraceError::BadField {
                    line: line_no,
                    field,
                    value: value.to_string(),
                })
            };
            let optional = |field: &'static str, value: &str| -> Result<Option<f64>, TraceError> {
                if value.is_empty() {
                    Ok(None)
                } else {
                    required(field, value).map(Some)
                }
            };
            records.push(TraceRecord {
                iter: fields[0].parse().map_err(|_| TraceError::BadField {
                    line: line_no,
                    field: "iter",
                    value: fields[0].to_string(),
                })?,
                rel_sq_error: optional("rel_sq_error", fields[1])?,
                consensus_residual: required("consensus_residual", fields[2])?,
                objective: required("objective", fields[3])?,
                fixed_point_residual: required("fixed_point_residual", fields[4])?,
                lyapunov: optional("lyapunov", fields[5])?,
                elapsed_ms: optional("elapsed_ms", fields[6])?,
            });
        }
        if !header_seen {
            return Err(TraceError::BadHeader(String::new()));
        }
        Ok(Self { form, comments, records })
    }
}

/// Serializes a stacked iterate (one row per agent) as a headerless CSV
/// checkpoint, floats in shortest round-trip form.
pub fn matrix_to_csv(matrix: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in matrix.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a checkpoint written by [`matrix_to_csv`]. Rows must be equally
/// long and every field numeric.
pub fn matrix_from_csv_str(text: &str) -> Result<nalgebra::DMatrix<f64>, TraceError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for value in line.split(',') {
            row.push(value.parse().map_err(|_| TraceError::BadField {
                line: line_no,
                field: "entry",
                value: value.to_string(),
            })?);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(TraceError::BadShape { line: line_no, found: row.len() });
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(nalgebra::DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
