//! CSV and sidecar-JSON file formats.
//!
//! CSV: comma separated, optional header row, `.` decimal point. A header is
//! detected when any field of the first non-empty row fails to parse as a
//! number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DissimilarityMatrix, ImageStack, PointSet};
use crate::error::{Error, Result};

/// Reads a numeric CSV table into a matrix, returning the header if present.
pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<(Option<Vec<String>>, DMatrix<f64>)> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_csv(&text)
}

fn parse_csv(text: &str) -> Result<(Option<Vec<String>>, DMatrix<f64>)> {
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                match width {
                    None => width = Some(vals.len()),
                    Some(w) if w != vals.len() => {
                        return Err(Error::Parse {
                            line: lineno + 1,
                            msg: format!("expected {w} fields, found {}", vals.len()),
                        })
                    }
                    _ => {}
                }
                rows.push(vals);
            }
            Err(e) => {
                if rows.is_empty() && header.is_none() {
                    width = Some(fields.len());
                    header = Some(fields.iter().map(|s| s.to_string()).collect());
                } else {
                    return Err(Error::Parse { line: lineno + 1, msg: format!("malformed number: {e}") });
                }
            }
        }
    }
    let w = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no data rows".into() });
    }
    Ok((header, DMatrix::from_fn(rows.len(), w, |i, j| rows[i][j])))
}

fn format_rows(m: &DMatrix<f64>, header: Option<&[String]>) -> String {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 12);
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            // `{}` is the shortest representation that round-trips exactly.
            write!(out, "{}", m[(i, j)]).expect("write to String");
        }
        out.push('\n');
    }
    out
}

/// Writes `m` without a header.
pub fn save_csv_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_rows(m, None))?;
    Ok(())
}

pub fn save_csv_with_header(m: &DMatrix<f64>, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_rows(m, Some(header)))?;
    Ok(())
}

/// Reads a point set; a header column named `label` holds integer labels.
pub fn load_csv_points(path: impl AsRef<Path>) -> Result<PointSet> {
    let (header, m) = read_csv_matrix(path)?;
    let label_col = header.as_ref().and_then(|h| h.iter().position(|c| c == "label"));
    match label_col {
        None => PointSet::new(m, None),
        Some(lc) => {
            let labels = (0..m.nrows())
                .map(|i| {
                    let v = m[(i, lc)];
                    if v.fract() != 0.0 {
                        Err(Error::Parse { line: i + 2, msg: format!("label {v} is not an integer") })
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let cols: Vec<usize> = (0..m.ncols()).filter(|&c| c != lc).collect();
            let pts = DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])]);
            PointSet::new(pts, Some(labels))
        }
    }
}

/// Writes a point set with header `x0,…,x{D-1}[,label]`.
pub fn save_points(ps: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    let d = ps.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    let m = match ps.labels() {
        None => ps.points().clone(),
        Some(l) => {
            header.push("label".into());
            DMatrix::from_fn(ps.len(), d + 1, |i, j| if j < d { ps.points()[(i, j)] } else { l[i] as f64 })
        }
    };
    save_csv_with_header(&m, &header, path)
}

/// Reads a square distance matrix, validating symmetry (tolerance 1e-9),
/// the zero diagonal and non-negativity.
pub fn load_csv_distances(path: impl AsRef<Path>) -> Result<DissimilarityMatrix> {
    let (_, m) = read_csv_matrix(path)?;
    DissimilarityMatrix::new(m)
}

/// Sidecar metadata of an image stack CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub height: usize,
    pub width: usize,
    pub labels: Option<Vec<i64>>,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes flattened images (one per row) and a `{height, width, labels}`
/// sidecar next to it with extension `.json`.
pub fn save_image_stack(stack: &ImageStack, csv: impl AsRef<Path>) -> Result<()> {
    let csv = csv.as_ref();
    save_csv_matrix(stack.pixels(), csv)?;
    let side = ImageSidecar {
        height: stack.height(),
        width: stack.width(),
        labels: stack.labels().map(<[i64]>::to_vec),
    };
    fs::write(sidecar_path(csv), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_image_stack(csv: impl AsRef<Path>) -> Result<ImageStack> {
    let csv = csv.as_ref();
    let side: ImageSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(csv))?)?;
    let (_, m) = read_csv_matrix(csv)?;
    ImageStack::new(side.height, side.width, m, side.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_detection_and_malformed_rows() {
        let (h, m) = parse_csv("a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(h.unwrap(), vec!["a", "b"]);
        assert_eq!(m.shape(), (2, 2));
        let (h, _) = parse_csv("1,2\n3,4\n").unwrap();
        assert!(h.is_none());
        assert!(matches!(parse_csv("1,2\n3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("1,2\n3,x\n"), Err(Error::Parse { line: 2, .. })));
    }
}
