//! Basic geometric primitives: least-squares fits, analytic point distances,
//! bounded charts for sampling, and the inlier trimming mask.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplinePatch;
use crate::error::{Error, Result};
use crate::geom::{any_perpendicular, centroid, principal_axes, sorted_eigen, Point3};
use crate::lsq::{self, LmOptions};

/// Smallest and largest admissible cone half-angle.
pub const MIN_HALF_ANGLE: f64 = 1e-4;
pub const MAX_HALF_ANGLE: f64 = FRAC_PI_2 - 1e-4;

/// Dense sample count used to approximate distances to B-spline patches.
pub const BSPLINE_DISTANCE_SAMPLES: usize = 2500;

/// Plane `normal . x = offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Point3,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Point3,
    pub radius: f64,
}

/// Infinite cylinder around the line through `center` along `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: Point3,
    pub direction: Point3,
    pub radius: f64,
}

/// Single-nappe cone opening from `apex` along `direction`.
///
/// `half_angle` is measured between the axis and a generator line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub apex: Point3,
    pub direction: Point3,
    pub half_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Plane,
    Sphere,
    Cylinder,
    Cone,
    OpenBspline,
    ClosedBspline,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::Plane,
        PrimitiveKind::Sphere,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Cone,
        PrimitiveKind::OpenBspline,
        PrimitiveKind::ClosedBspline,
    ];

    pub const BASIC: [PrimitiveKind; 4] = [
        PrimitiveKind::Plane,
        PrimitiveKind::Sphere,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Plane => "plane",
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Cylinder => "cylinder",
            PrimitiveKind::Cone => "cone",
            PrimitiveKind::OpenBspline => "open_bspline",
            PrimitiveKind::ClosedBspline => "closed_bspline",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_bspline(self) -> bool {
        matches!(self, PrimitiveKind::OpenBspline | PrimitiveKind::ClosedBspline)
    }

    /// Minimum number of points a least-squares fit of this kind needs.
    pub fn min_points(self) -> usize {
        match self {
            PrimitiveKind::Plane => 3,
            PrimitiveKind::Sphere => 4,
            PrimitiveKind::Cylinder | PrimitiveKind::Cone => 6,
            PrimitiveKind::OpenBspline | PrimitiveKind::ClosedBspline => 16,
        }
    }
}

impl std::fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fitted surface patch of any supported kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitivePatch {
    Plane(Plane),
    Sphere(Sphere),
    Cylinder(Cylinder),
    Cone(Cone),
    BSpline(BSplinePatch),
}

impl PrimitivePatch {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            PrimitivePatch::Plane(_) => PrimitiveKind::Plane,
            PrimitivePatch::Sphere(_) => PrimitiveKind::Sphere,
            PrimitivePatch::Cylinder(_) => PrimitiveKind::Cylinder,
            PrimitivePatch::Cone(_) => PrimitiveKind::Cone,
            PrimitivePatch::BSpline(p) if p.closed_u() || p.closed_v() => PrimitiveKind::ClosedBspline,
            PrimitivePatch::BSpline(_) => PrimitiveKind::OpenBspline,
        }
    }

    /// Number of free scalar parameters (degrees of freedom) of the patch.
    pub fn degrees_of_freedom(&self) -> usize {
        match self {
            PrimitivePatch::Plane(_) => 3,
            PrimitivePatch::Sphere(_) => 4,
            PrimitivePatch::Cylinder(_) => 5,
            PrimitivePatch::Cone(_) => 6,
            PrimitivePatch::BSpline(p) => 3 * p.grid().rows() * p.grid().cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: &Point3| (v.norm() - 1.0).abs() <= 1e-9;
        let ok = match self {
            PrimitivePatch::Plane(p) => unit(&p.normal) && p.offset.is_finite(),
            PrimitivePatch::Sphere(s) => s.radius > 0.0 && s.center.iter().all(|c| c.is_finite()),
            PrimitivePatch::Cylinder(c) => unit(&c.direction) && c.radius > 0.0,
            PrimitivePatch::Cone(c) => unit(&c.direction) && c.half_angle > 0.0 && c.half_angle < FRAC_PI_2,
            PrimitivePatch::BSpline(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid {} parameters", self.kind())))
        }
    }
}

impl Plane {
    pub fn distance(&self, p: &Point3) -> f64 {
        (self.normal.dot(p) - self.offset).abs()
    }
}

impl Sphere {
    pub fn distance(&self, p: &Point3) -> f64 {
        ((p - self.center).norm() - self.radius).abs()
    }
}

impl Cylinder {
    fn signed_distance(&self, p: &Point3) -> f64 {
        let w = p - self.center;
        (w - self.direction * w.dot(&self.direction)).norm() - self.radius
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }
}

impl Cone {
    /// Distance to the cone surface; positive outside in the generator region,
    /// distance to the apex behind it.
    fn signed_distance(&self, p: &Point3) -> f64 {
        let v = p - self.apex;
        let h = v.dot(&self.direction);
        let rho = (v - self.direction * h).norm();
        let (s, c) = self.half_angle.sin_cos();
        if h * c + rho * s >= 0.0 {
            rho * c - h * s
        } else {
            v.norm()
        }
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }
}

/// Point-to-patch distance with per-patch precomputation.
///
/// B-spline distances start at the nearest of a dense sample lattice and are
/// refined by projecting onto the surface from that sample's parameter.
pub struct DistanceEvaluator<'a> {
    patch: &'a PrimitivePatch,
    samples: Vec<Point3>,
    params: Vec<[f64; 2]>,
}

impl<'a> DistanceEvaluator<'a> {
    pub fn new(patch: &'a PrimitivePatch) -> Self {
        Self::with_samples(patch, BSPLINE_DISTANCE_SAMPLES)
    }

    pub fn with_samples(patch: &'a PrimitivePatch, count: usize) -> Self {
        let lattice = match patch {
            PrimitivePatch::BSpline(b) => {
                let side = ((count as f64).sqrt().round() as usize).max(2);
                b.sample_uniform(side, side).unwrap_or_default()
            }
            _ => Vec::new(),
        };
        let (samples, params) = lattice.into_iter().map(|s| (s.position, s.uv)).unzip();
        Self { patch, samples, params }
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        match self.patch {
            PrimitivePatch::Plane(x) => x.distance(p),
            PrimitivePatch::Sphere(x) => x.distance(p),
            PrimitivePatch::Cylinder(x) => x.distance(p),
            PrimitivePatch::Cone(x) => x.distance(p),
            PrimitivePatch::BSpline(b) => match crate::geom::nearest(p, &self.samples) {
                Some((i, d2)) => {
                    let uv = b.project(p, self.params[i]);
                    (b.eval_unchecked(uv[0], uv[1]) - p).norm().min(d2.sqrt())
                }
                None => f64::INFINITY,
            },
        }
    }

    pub fn distances(&self, points: &[Point3]) -> Vec<f64> {
        use rayon::prelude::*;
        points.par_iter().map(|p| self.distance(p)).collect()
    }
}

/// Unsigned distance from `point` to `patch`.
pub fn primitive_distance(point: &Point3, patch: &PrimitivePatch) -> f64 {
    DistanceEvaluator::new(patch).distance(point)
}

/// Least-squares fit of a basic primitive.
pub fn fit_primitive(kind: PrimitiveKind, points: &[Point3], normals: Option<&[Point3]>) -> Result<PrimitivePatch> {
    if kind.is_bspline() {
        return Err(Error::InvalidArgument(
            "B-spline patches are fitted by the bspline module".into(),
        ));
    }
    if points.len() < kind.min_points() {
        return Err(Error::InsufficientSamples {
            required: kind.min_points(),
            got: points.len(),
        });
    }
    if let Some(n) = normals {
        if n.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: n.len(),
            });
        }
    }
    let pa = principal_axes(points);
    if !(pa.variances[0] > 1e-24) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    match kind {
        PrimitiveKind::Plane => fit_plane(points).map(PrimitivePatch::Plane),
        PrimitiveKind::Sphere => fit_sphere(points).map(PrimitivePatch::Sphere),
        PrimitiveKind::Cylinder => fit_cylinder(points, normals).map(PrimitivePatch::Cylinder),
        PrimitiveKind::Cone => fit_cone(points, normals).map(PrimitivePatch::Cone),
        _ => unreachable!(),
    }
}

pub fn fit_plane(points: &[Point3]) -> Result<Plane> {
    let pa = principal_axes(points);
    if pa.variances[1] <= 1e-12 * pa.variances[0] {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let normal = pa.axes[2];
    Ok(Plane {
        normal,
        offset: normal.dot(&pa.centroid),
    })
}

fn sse<F: Fn(&Point3) -> f64>(points: &[Point3], d: F) -> f64 {
    points.iter().map(|p| d(p).powi(2)).sum()
}

pub fn fit_sphere(points: &[Point3]) -> Result<Sphere> {
    let c0 = centroid(points);
    let scale = points.iter().map(|p| (p - c0).norm()).fold(0.0, f64::max);
    // |p|^2 = 2 c.p + (r^2 - |c|^2), linear in (c, r^2 - |c|^2), on centered and scaled data.
    let mut a = DMatrix::zeros(points.len(), 4);
    let mut b = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        let q = (p - c0) / scale;
        a[(i, 0)] = 2.0 * q.x;
        a[(i, 1)] = 2.0 * q.y;
        a[(i, 2)] = 2.0 * q.z;
        a[(i, 3)] = 1.0;
        b[i] = q.norm_squared();
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-9 * smax {
        return Err(Error::Degenerate("points are coplanar; no unique sphere".into()));
    }
    let x = svd.solve(&b, 1e-12).map_err(|e| Error::Degenerate(e.to_string()))?;
    let c = Point3::new(x[0], x[1], x[2]);
    let r2 = x[3] + c.norm_squared();
    if !(r2 > 0.0) {
        return Err(Error::Degenerate("algebraic sphere fit has no real radius".into()));
    }
    let init = Sphere {
        center: c0 + c * scale,
        radius: r2.sqrt() * scale,
    };
    let x0 = DVector::from_vec(vec![init.center.x, init.center.y, init.center.z, init.radius]);
    let res = |x: &DVector<f64>| {
        let c = Point3::new(x[0], x[1], x[2]);
        DVector::from_iterator(points.len(), points.iter().map(|p| (p - c).norm() - x[3]))
    };
    let x = lsq::minimize(x0, res, LmOptions::default());
    let refined = Sphere {
        center: Point3::new(x[0], x[1], x[2]),
        radius: x[3].abs(),
    };
    if sse(points, |p| refined.distance(p)) <= sse(points, |p| init.distance(p)) {
        Ok(refined)
    } else {
        Ok(init)
    }
}

/// Algebraic circle fit in the plane spanned by `e1`, `e2`; returns the 3D
/// center (in the plane through the centroid) and radius.
fn fit_circle(points: &[Point3], origin: &Point3, e1: &Point3, e2: &Point3) -> Option<(Point3, f64)> {
    let mut a = DMatrix::zeros(points.len(), 3);
    let mut b = DVector::zeros(points.len());
    let scale = points
        .iter()
        .map(|p| (p - origin).norm())
        .fold(0.0, f64::max)
        .max(1e-300);
    for (i, p) in points.iter().enumerate() {
        let d = (p - origin) / scale;
        let (x, y) = (d.dot(e1), d.dot(e2));
        a[(i, 0)] = 2.0 * x;
        a[(i, 1)] = 2.0 * y;
        a[(i, 2)] = 1.0;
        b[i] = x * x + y * y;
    }
    let svd = a.svd(true, true);
    if svd.singular_values.min() <= 1e-9 * svd.singular_values.max() {
        return None;
    }
    let x = svd.solve(&b, 1e-12).ok()?;
    let r2 = x[2] + x[0] * x[0] + x[1] * x[1];
    if !(r2 > 0.0) {
        return None;
    }
    Some((origin + (e1 * x[0] + e2 * x[1]) * scale, r2.sqrt() * scale))
}

fn normal_null_direction(normals: &[Point3], centered: bool) -> Point3 {
    let mean = if centered { centroid(normals) } else { Point3::zeros() };
    let mut m = Matrix3::zeros();
    for n in normals {
        let d = n - mean;
        m += d * d.transpose();
    }
    sorted_eigen(m).0[2]
}

pub fn fit_cylinder(points: &[Point3], normals: Option<&[Point3]>) -> Result<Cylinder> {
    let pa = principal_axes(points);
    let mut candidates: Vec<Point3> = Vec::new();
    if let Some(ns) = normals {
        candidates.push(normal_null_direction(ns, false));
    }
    candidates.extend(pa.axes.iter().rev().cloned());

    let mut best: Option<(f64, Cylinder)> = None;
    for dir in candidates {
        let e1 = any_perpendicular(&dir);
        let e2 = dir.cross(&e1);
        let Some((center, radius)) = fit_circle(points, &pa.centroid, &e1, &e2) else {
            continue;
        };
        let init = Cylinder {
            center,
            direction: dir,
            radius,
        };
        let refined = refine_cylinder(points, init);
        let cost = sse(points, |p| refined.distance(p));
        if cost.is_finite() && best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, refined));
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Degenerate("no cylinder through the points".into()))
}

fn refine_cylinder(points: &[Point3], init: Cylinder) -> Cylinder {
    let x0 = DVector::from_vec(vec![
        init.center.x,
        init.center.y,
        init.center.z,
        init.direction.x,
        init.direction.y,
        init.direction.z,
        init.radius,
    ]);
    let unpack = |x: &DVector<f64>| {
        let d = Point3::new(x[3], x[4], x[5]);
        Cylinder {
            center: Point3::new(x[0], x[1], x[2]),
            direction: d / d.norm(),
            radius: x[6],
        }
    };
    let res = |x: &DVector<f64>| {
        let c = unpack(x);
        DVector::from_iterator(points.len(), points.iter().map(|p| c.signed_distance(p)))
    };
    let x = lsq::minimize(x0, res, LmOptions::default());
    let mut out = unpack(&x);
    out.radius = out.radius.abs();
    // Move the axis anchor to the foot of the centroid.
    let g = centroid(points);
    out.center += out.direction * (g - out.center).dot(&out.direction);
    let before = sse(points, |p| init.distance(p));
    if out.radius > 0.0 && sse(points, |p| out.distance(p)) <= before {
        out
    } else {
        init
    }
}

fn cone_from_axis_regression(points: &[Point3], origin: &Point3, dir: &Point3) -> Option<Cone> {
    // rho = alpha + beta * h along the axis line through `origin`.
    let n = points.len() as f64;
    let (mut sh, mut sr, mut shh, mut shr) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        let w = p - origin;
        let h = w.dot(dir);
        let rho = (w - dir * h).norm();
        sh += h;
        sr += rho;
        shh += h * h;
        shr += h * rho;
    }
    let var = shh - sh * sh / n;
    if !(var > 0.0) {
        return None;
    }
    let mut beta = (shr - sh * sr / n) / var;
    let alpha = (sr - beta * sh) / n;
    // Flipping the axis negates the slope and keeps the intercept.
    let mut d = *dir;
    if beta < 0.0 {
        d = -d;
        beta = -beta;
    }
    let beta = beta.max(MIN_HALF_ANGLE.tan());
    let apex = origin - d * (alpha / beta);
    Some(Cone {
        apex,
        direction: d,
        half_angle: beta.atan().clamp(MIN_HALF_ANGLE, MAX_HALF_ANGLE),
    })
}

fn cone_from_normals(points: &[Point3], normals: &[Point3]) -> Option<Cone> {
    let dir = normal_null_direction(normals, true);
    // The apex lies on every tangent plane.
    let mut m = Matrix3::zeros();
    let mut rhs = Point3::zeros();
    for (p, n) in points.iter().zip(normals) {
        let nn = n * n.transpose();
        m += nn;
        rhs += nn * p;
    }
    let apex = m.try_inverse()? * rhs;
    let g = centroid(points);
    let d = if (g - apex).dot(&dir) >= 0.0 { dir } else { -dir };
    let mean_sin = normals.iter().map(|n| n.dot(&d).abs()).sum::<f64>() / normals.len() as f64;
    Some(Cone {
        apex,
        direction: d,
        half_angle: mean_sin.clamp(0.0, 1.0).asin().clamp(MIN_HALF_ANGLE, MAX_HALF_ANGLE),
    })
}

pub fn fit_cone(points: &[Point3], normals: Option<&[Point3]>) -> Result<Cone> {
    let pa = principal_axes(points);
    let mut inits = Vec::new();
    if let Some(ns) = normals {
        inits.extend(cone_from_normals(points, ns));
    }
    for axis in pa.axes.iter().rev() {
        inits.extend(cone_from_axis_regression(points, &pa.centroid, axis));
    }
    let mut best: Option<(f64, Cone)> = None;
    for init in inits {
        let refined = refine_cone(points, init);
        let cost = sse(points, |p| refined.distance(p));
        if cost.is_finite() && best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, refined));
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Degenerate("no cone through the points".into()))
}

fn refine_cone(points: &[Point3], init: Cone) -> Cone {
    let x0 = DVector::from_vec(vec![
        init.apex.x,
        init.apex.y,
        init.apex.z,
        init.direction.x,
        init.direction.y,
        init.direction.z,
        init.half_angle,
    ]);
    let unpack = |x: &DVector<f64>| {
        let d = Point3::new(x[3], x[4], x[5]);
        Cone {
            apex: Point3::new(x[0], x[1], x[2]),
            direction: d / d.norm(),
            half_angle: x[6].clamp(MIN_HALF_ANGLE, MAX_HALF_ANGLE),
        }
    };
    let res = |x: &DVector<f64>| {
        let c = unpack(x);
        DVector::from_iterator(points.len(), points.iter().map(|p| c.signed_distance(p)))
    };
    let x = lsq::minimize(x0, res, LmOptions::default());
    let out = unpack(&x);
    if sse(points, |p| out.distance(p)) <= sse(points, |p| init.distance(p)) {
        out
    } else {
        init
    }
}

/// Bounded `[0,1]^2` parametrization of a patch around a supporting segment.
#[derive(Debug, Clone)]
pub enum Chart {
    Plane {
        origin: Point3,
        e1: Point3,
        e2: Point3,
        u: (f64, f64),
        v: (f64, f64),
    },
    Sphere {
        center: Point3,
        radius: f64,
        axis: [Point3; 3],
    },
    Cylinder {
        center: Point3,
        axis: [Point3; 3],
        radius: f64,
        h: (f64, f64),
    },
    Cone {
        apex: Point3,
        axis: [Point3; 3],
        half_angle: f64,
        slant: (f64, f64),
    },
    BSpline(BSplinePatch),
}

impl Chart {
    /// Chart covering the part of `patch` near `segment`, padded by `margin`.
    pub fn around(patch: &PrimitivePatch, segment: &[Point3], margin: f64) -> Result<Self> {
        if segment.is_empty() && !matches!(patch, PrimitivePatch::BSpline(_)) {
            return Err(Error::Empty("segment"));
        }
        let frame = |d: Point3| {
            let e1 = any_perpendicular(&d);
            [d, e1, d.cross(&e1)]
        };
        let range = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            (lo - margin, hi + margin)
        };
        Ok(match patch {
            PrimitivePatch::Plane(p) => {
                let e1 = any_perpendicular(&p.normal);
                let e2 = p.normal.cross(&e1);
                let origin = p.normal * p.offset;
                Chart::Plane {
                    origin,
                    e1,
                    e2,
                    u: range(&mut segment.iter().map(|x| (x - origin).dot(&e1))),
                    v: range(&mut segment.iter().map(|x| (x - origin).dot(&e2))),
                }
            }
            PrimitivePatch::Sphere(s) => Chart::Sphere {
                center: s.center,
                radius: s.radius,
                axis: frame(Point3::z()),
            },
            PrimitivePatch::Cylinder(c) => Chart::Cylinder {
                center: c.center,
                axis: frame(c.direction),
                radius: c.radius,
                h: range(&mut segment.iter().map(|x| (x - c.center).dot(&c.direction))),
            },
            PrimitivePatch::Cone(c) => {
                let (s, co) = c.half_angle.sin_cos();
                let (lo, hi) = range(&mut segment.iter().map(|x| {
                    let v = x - c.apex;
                    let h = v.dot(&c.direction);
                    let rho = (v - c.direction * h).norm();
                    h * co + rho * s
                }));
                Chart::Cone {
                    apex: c.apex,
                    axis: frame(c.direction),
                    half_angle: c.half_angle,
                    slant: (lo.max(0.0), hi.max(0.0)),
                }
            }
            PrimitivePatch::BSpline(b) => Chart::BSpline(b.clone()),
        })
    }

    /// Whether the first chart coordinate wraps around.
    pub fn closed_s(&self) -> bool {
        match self {
            Chart::Plane { .. } => false,
            Chart::Sphere { .. } | Chart::Cylinder { .. } | Chart::Cone { .. } => true,
            Chart::BSpline(b) => b.closed_u(),
        }
    }

    pub fn closed_t(&self) -> bool {
        match self {
            Chart::BSpline(b) => b.closed_v(),
            _ => false,
        }
    }

    /// Surface point for chart coordinates in `[0,1]^2`. The sphere, cone and
    /// cylinder charts are area-uniform in `(s, t)`.
    pub fn point(&self, s: f64, t: f64) -> Point3 {
        let lerp = |r: (f64, f64), x: f64| r.0 + (r.1 - r.0) * x;
        match self {
            Chart::Plane { origin, e1, e2, u, v } => origin + e1 * lerp(*u, s) + e2 * lerp(*v, t),
            Chart::Sphere { center, radius, axis } => {
                let phi = TAU * s;
                let z = 1.0 - 2.0 * t;
                let r = (1.0 - z * z).max(0.0).sqrt();
                center + (axis[0] * z + axis[1] * (r * phi.cos()) + axis[2] * (r * phi.sin())) * *radius
            }
            Chart::Cylinder {
                center,
                axis,
                radius,
                h,
            } => {
                let phi = TAU * s;
                center + axis[0] * lerp(*h, t) + (axis[1] * phi.cos() + axis[2] * phi.sin()) * *radius
            }
            Chart::Cone {
                apex,
                axis,
                half_angle,
                slant,
            } => {
                let phi = TAU * s;
                let l = (slant.0 * slant.0 + t * (slant.1 * slant.1 - slant.0 * slant.0)).sqrt();
                let (sn, cs) = half_angle.sin_cos();
                apex + (axis[0] * cs + (axis[1] * phi.cos() + axis[2] * phi.sin()) * sn) * l
            }
            Chart::BSpline(b) => b.eval_unchecked(s.clamp(0.0, 1.0), t.clamp(0.0, 1.0)),
        }
    }

    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Point3> {
        (0..count)
            .map(|_| self.point(rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }
}

/// Mask over `samples`: true where a sample lies within `epsilon` of some
/// segment point.
pub fn trim_inlier_mask(segment: &[Point3], samples: &[Point3], epsilon: f64) -> Result<Vec<bool>> {
    if segment.is_empty() {
        return Err(Error::Empty("segment"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("trim epsilon must be positive".into()));
    }
    let eps2 = epsilon * epsilon;
    Ok(crate::geom::nearest_sq_distances(samples, segment)
        .into_iter()
        .map(|d| d <= eps2)
        .collect())
}

/// Random samples of `patch` restricted to the region supported by `segment`.
pub fn trimmed_samples<R: Rng>(
    patch: &PrimitivePatch,
    segment: &[Point3],
    count: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    let chart = Chart::around(patch, segment, epsilon)?;
    let raw = chart.sample(count, rng);
    let mask = trim_inlier_mask(segment, &raw, epsilon)?;
    Ok(raw.into_iter().zip(mask).filter(|(_, k)| *k).map(|(p, _)| p).collect())
}
