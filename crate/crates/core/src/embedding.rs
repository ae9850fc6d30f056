//! Per-point unit-norm embeddings consumed by the clustering stage.
//!
//! Embeddings can be loaded from a text file produced by an external model
//! or computed analytically from positions and normals.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{bounding_box, PointCloud};

/// N×D row-major matrix whose rows have unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

fn normalize_row(row: &mut [f64], line: usize) -> Result<()> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding value"));
    }
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate(format!("embedding row {line} has zero norm")));
    }
    row.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

impl EmbeddingMatrix {
    /// Builds a matrix from flat row-major data, normalizing every row.
    pub fn from_flat(rows: usize, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Empty("embedding matrix"));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                got: data.len(),
            });
        }
        for (i, row) in data.chunks_mut(dim).enumerate() {
            normalize_row(row, i)?;
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::from_flat(rows.len(), dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Rows restricted to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { dim: self.dim, data }
    }

    /// Parses the text format: a header line `N D`, then N rows of D reals.
    pub fn parse<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let (rows, dim) = loop {
            let Some((no, line)) = lines.next() else {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                });
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Vec<usize> = fields.iter().filter_map(|f| f.parse().ok()).collect();
            if fields.len() != 2 || parsed.len() != 2 || parsed[0] == 0 || parsed[1] == 0 {
                return Err(Error::Parse {
                    line: no + 1,
                    message: format!("expected header \"N D\", found {line:?}"),
                });
            }
            break (parsed[0], parsed[1]);
        };
        let mut data = Vec::with_capacity(rows * dim);
        for (no, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for field in line.split_whitespace() {
                let x: f64 = field.parse().map_err(|_| Error::Parse {
                    line: no + 1,
                    message: format!("not a number: {field:?}"),
                })?;
                data.push(x);
            }
            if data.len() - before != dim {
                return Err(Error::Parse {
                    line: no + 1,
                    message: format!("expected {dim} values, found {}", data.len() - before),
                });
            }
        }
        if data.len() != rows * dim {
            return Err(Error::Parse {
                line: 1,
                message: format!("header announces {rows} rows, found {}", data.len() / dim),
            });
        }
        Self::from_flat(rows, dim, data)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::parse(std::fs::File::open(path)?)
}

pub fn write_embeddings(path: impl AsRef<Path>, embeddings: &EmbeddingMatrix) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    embeddings.write(file)
}

/// Flips `n` so that its first nonzero coordinate is positive.
pub fn canonical_normal_sign(n: &crate::Point3) -> crate::Point3 {
    match n.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -n,
        _ => *n,
    }
}

/// Analytic embedding: `normalize(scale_position * p', scale_normal * n')`.
///
/// Positions `p'` are centered on the bounding-box center and divided by the
/// box diagonal, so the result does not depend on the cloud's placement or
/// scale. Normals `n'` are sign-canonicalized. With `scale_normal == 0` the
/// rows are 3-dimensional, otherwise 6-dimensional.
pub fn geometric_embedding(cloud: &PointCloud, scale_position: f64, scale_normal: f64) -> Result<EmbeddingMatrix> {
    if !(scale_position >= 0.0 && scale_normal >= 0.0) || scale_position + scale_normal == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "embedding scales must be nonnegative and not both zero, got ({scale_position}, {scale_normal})"
        )));
    }
    let normals = match (&cloud.normals, scale_normal > 0.0) {
        (Some(n), true) => Some(n),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "geometric embedding with normal scale > 0 needs normals".into(),
            ))
        }
        (_, false) => None,
    };
    let (lo, hi) = bounding_box(&cloud.positions);
    let center = (lo + hi) * 0.5;
    let diag = (hi - lo).norm();
    let inv = if diag > 0.0 { 1.0 / diag } else { 1.0 };
    let dim = if normals.is_some() { 6 } else { 3 };
    let mut data = Vec::with_capacity(cloud.len() * dim);
    for (i, p) in cloud.positions.iter().enumerate() {
        let q = (p - center) * (inv * scale_position);
        data.extend_from_slice(&[q.x, q.y, q.z]);
        if let Some(ns) = normals {
            let n = canonical_normal_sign(&ns[i]) * scale_normal;
            data.extend_from_slice(&[n.x, n.y, n.z]);
        }
    }
    // A point at the box center with no normal part would have a zero row.
    if normals.is_none() {
        for row in data.chunks_mut(3) {
            if row.iter().all(|x| *x == 0.0) {
                row[0] = f64::MIN_POSITIVE;
            }
        }
    }
    EmbeddingMatrix::from_flat(cloud.len(), dim, data)
}
