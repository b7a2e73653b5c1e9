//! CSV ingestion and numeric serialization.
//!
//! Data files hold one replication per row and one column per design point.
//! Blank lines and lines starting with `#` are ignored. Matrices are written
//! with 17 significant digits, which round-trips every `f64` exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Reads a numeric table; `expected_cols` fixes the row length when given,
/// otherwise the first row sets it.
pub fn read_table(path: &Path, expected_cols: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let name = path.display();
    let mut rows = Vec::new();
    let mut width = expected_cols;
    for record in reader(path)?.records() {
        let record = record.map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse(format!(
                "{name} line {line}: expected {w} values, found {}",
                record.len()
            )));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("{name} line {line}, column {}: cannot parse {field:?}", c + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "{name} line {line}, column {}: non-finite value",
                        c + 1
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{name}: no data rows")));
    }
    Ok(rows)
}

/// A single-column file of design points.
pub fn read_points(path: &Path) -> Result<Vec<f64>> {
    Ok(read_table(path, Some(1))?.into_iter().map(|r| r[0]).collect())
}

/// A two-column file of `(s, t)` pairs.
pub fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    Ok(read_table(path, Some(2))?.into_iter().map(|r| (r[0], r[1])).collect())
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_file(path, &matrix_to_csv(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_table(path, None)?;
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

/// A CSV with a header line and float cells.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
