//! Line-oriented numeric parsing shared by the plain-text file formats.

use crate::error::{Error, Result};

/// Splits text into rows of numbers with their 1-based line numbers.
/// Blank lines and `#` comments are skipped; any other token that fails to
/// parse as a float is a [`Error::Parse`] carrying the offending line.
pub(crate) fn numeric_rows(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut vals = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("expected a number, found {tok:?}"),
            })?;
            vals.push(v);
        }
        rows.push((lineno + 1, vals));
    }
    Ok(rows)
}

/// Reads one row as a non-negative integer, rejecting fractional values.
pub(crate) fn as_usize(row: &(usize, Vec<f64>), idx: usize, what: &str) -> Result<usize> {
    let v = row.1[idx];
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(Error::Parse {
            line: row.0,
            msg: format!("{what} must be a non-negative integer, found {v}"),
        });
    }
    Ok(v as usize)
}
