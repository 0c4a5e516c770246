//! Matrix input/output: CSV (row-major, optional header) and JSON arrays of
//! arrays, plus serde adapters for nalgebra types.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::DimensionMismatch("empty matrix".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parses a row-major CSV matrix. A first line that does not parse as
/// numbers is treated as a header.
pub fn parse_csv_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::Parse {
                            line,
                            message: format!(
                                "expected {} fields, found {}",
                                first.len(),
                                row.len()
                            ),
                        });
                    }
                }
                rows.push(row);
            }
            Err(e) if idx == 0 => {
                // header line
                let _ = e;
            }
            Err(e) => {
                return Err(Error::Parse {
                    line,
                    message: format!("non-numeric field: {e}"),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no numeric rows".into(),
        });
    }
    matrix_from_rows(&rows)
}

pub fn parse_json_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    matrix_from_rows(&rows)
}

/// Reads a matrix from CSV or JSON; JSON is recognised by a leading `[`.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        parse_json_matrix(&text)
    } else {
        parse_csv_matrix(&text)
    }
}

/// Like [`read_matrix`], additionally checking declared dimensions.
pub fn read_matrix_with_shape(
    path: &Path,
    rows: Option<usize>,
    cols: Option<usize>,
) -> Result<DMatrix<f64>> {
    let m = read_matrix(path)?;
    if rows.is_some_and(|r| r != m.nrows()) || cols.is_some_and(|c| c != m.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "{} is {}x{}, declared {}x{}",
            path.display(),
            m.nrows(),
            m.ncols(),
            rows.map_or("?".to_string(), |r| r.to_string()),
            cols.map_or("?".to_string(), |c| c.to_string()),
        )));
    }
    Ok(m)
}

/// `DMatrix<f64>` as an array of row arrays.
pub mod serde_matrix {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        m: &DMatrix<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// `Vec<DMatrix<f64>>` as an array of matrices.
pub mod serde_matrix_list {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        ms: &[DMatrix<f64>],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        ms.iter()
            .map(matrix_to_rows)
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<DMatrix<f64>>, D::Error> {
        let raw = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        raw.iter()
            .map(|rows| matrix_from_rows(rows).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// `DVector<f64>` as a flat array.
pub mod serde_vector {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        v: &DVector<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_and_without_header() {
        let m = parse_csv_matrix("a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 0)], 3.0);
        let m = parse_csv_matrix("1, 2\n3, 4\n5, 6\n").unwrap();
        assert_eq!(m.shape(), (3, 2));
    }

    #[test]
    fn csv_reports_line_numbers() {
        match parse_csv_matrix("1,2\n3,4\n5,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv_matrix("1,2\n3,4,5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_matrix() {
        let m = parse_json_matrix("[[1,2],[3,4.5]]").unwrap();
        assert_eq!(m[(1, 1)], 4.5);
        assert!(parse_json_matrix("[[1,2],[3]]").is_err());
    }
}
