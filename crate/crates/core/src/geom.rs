//! Shared geometric types and brute-force proximity queries.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Input point set, optionally carrying one unit normal per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub normals: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, normals: Option<Vec<Point3>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point positions"));
        }
        if let Some(normals) = &normals {
            if normals.len() != positions.len() {
                return Err(Error::DimensionMismatch {
                    expected: positions.len(),
                    got: normals.len(),
                });
            }
            if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidArgument("normals must be unit length".into()));
            }
        }
        Ok(Self { positions, normals })
    }

    /// Builds a cloud, normalizing any non-unit normals instead of rejecting them.
    pub fn with_normalized(positions: Vec<Point3>, normals: Option<Vec<Point3>>) -> Result<Self> {
        let normals = match normals {
            Some(ns) => {
                let mut out = Vec::with_capacity(ns.len());
                for n in ns {
                    let len = n.norm();
                    if !(len > 0.0) || !len.is_finite() {
                        return Err(Error::Degenerate("zero-length normal".into()));
                    }
                    out.push(n / len);
                }
                Some(out)
            }
            None => None,
        };
        Self::new(positions, normals)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Sub-cloud made of the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }

    pub fn bounding_box(&self) -> (Point3, Point3) {
        bounding_box(&self.positions)
    }
}

pub fn bounding_box(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn bbox_diagonal(points: &[Point3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (lo, hi) = bounding_box(points);
    (hi - lo).norm()
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let sum: Point3 = points.iter().sum();
    sum / points.len().max(1) as f64
}

/// Principal axes of a point set.
#[derive(Debug, Clone)]
pub struct PrincipalAxes {
    pub centroid: Point3,
    /// Unit eigenvectors ordered by decreasing variance.
    pub axes: [Point3; 3],
    pub variances: [f64; 3],
}

pub fn principal_axes(points: &[Point3]) -> PrincipalAxes {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len().max(1) as f64;
    let (axes, variances) = sorted_eigen(cov);
    PrincipalAxes {
        centroid: c,
        axes,
        variances,
    }
}

/// Eigen-decomposition of a symmetric 3x3 matrix, sorted by decreasing eigenvalue.
pub fn sorted_eigen(m: Matrix3<f64>) -> ([Point3; 3], [f64; 3]) {
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = order.map(|k| eig.eigenvectors.column(k).into_owned().normalize());
    let vals = order.map(|k| eig.eigenvalues[k]);
    (axes, vals)
}

/// Any unit vector perpendicular to `n`.
pub fn any_perpendicular(n: &Point3) -> Point3 {
    let a = if n.x.abs() < 0.9 { Point3::x() } else { Point3::y() };
    n.cross(&a).normalize()
}

/// Index and squared distance of the nearest point of `set` to `query`.
pub fn nearest(query: &Point3, set: &[Point3]) -> Option<(usize, f64)> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, p) in set.iter().enumerate() {
        let d = (p - query).norm_squared();
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best.map(|i| (i, best_d))
}

/// For each query point, the squared distance to its nearest neighbour in `set`.
pub fn nearest_sq_distances(queries: &[Point3], set: &[Point3]) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| nearest(q, set).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
pub fn one_sided_chamfer(from: &[Point3], to: &[Point3]) -> f64 {
    let d = nearest_sq_distances(from, to);
    d.iter().sum::<f64>() / d.len().max(1) as f64
}

/// Symmetric Chamfer distance: mean of both one-sided mean squared distances.
pub fn symmetric_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    0.5 * (one_sided_chamfer(a, b) + one_sided_chamfer(b, a))
}

/// Rotation about a unit axis by `angle` radians.
pub fn rotation(axis: &Point3, angle: f64) -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}
