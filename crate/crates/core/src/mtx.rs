//! Matrix Market coordinate files and plain-text vectors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{SparseMatrix, Vector};

const HEADER: &str = "%%MatrixMarket matrix coordinate real general";

/// 17 significant digits: enough to round-trip any f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix_market(path: &Path, m: &SparseMatrix, comment: Option<&str>) -> Result<()> {
    let mut out = String::with_capacity(32 * (m.nnz() + 2));
    out.push_str(HEADER);
    out.push('\n');
    if let Some(c) = comment {
        for line in c.lines() {
            let _ = writeln!(out, "% {line}");
        }
    }
    let _ = writeln!(out, "{} {} {}", m.rows(), m.cols(), m.nnz());
    for &(r, c, v) in m.triplets() {
        let _ = writeln!(out, "{} {} {}", r + 1, c + 1, format_f64(v));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_market(path: &Path) -> Result<SparseMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?;
    let tokens: Vec<String> = header
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens != ["%%matrixmarket", "matrix", "coordinate", "real", "general"] {
        return Err(Error::parse(path, format!("unsupported header `{header}`")));
    }
    let mut body = lines.filter(|l| !l.starts_with('%') && !l.trim().is_empty());
    let size = body
        .next()
        .ok_or_else(|| Error::parse(path, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, format!("bad size line `{size}`: {e}")))?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(Error::parse(path, format!("bad size line `{size}`")));
    };
    let mut triplets = Vec::with_capacity(nnz);
    for line in body {
        let mut it = line.split_whitespace();
        let (Some(r), Some(c), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(Error::parse(path, format!("bad entry `{line}`")));
        };
        let parse_idx = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i - 1),
                _ => Err(Error::parse(path, format!("bad index `{s}`"))),
            }
        };
        let v: f64 = v
            .parse()
            .map_err(|_| Error::parse(path, format!("bad value `{v}`")))?;
        triplets.push((parse_idx(r)?, parse_idx(c)?, v));
    }
    if triplets.len() != nnz {
        return Err(Error::parse(
            path,
            format!("expected {nnz} entries, found {}", triplets.len()),
        ));
    }
    SparseMatrix::new(rows, cols, triplets).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_vector(path: &Path, v: &Vector) -> Result<()> {
    let mut out = String::with_capacity(26 * v.len());
    for x in v.iter() {
        out.push_str(&format_f64(*x));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_vector(path: &Path) -> Result<Vector> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, format!("bad value `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::parse(path, format!("non-finite value {bad}")));
    }
    Ok(Vector::from_vec(values))
}
