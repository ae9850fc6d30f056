//! File formats: point cloud text, patch-set JSON and OBJ mesh export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bspline::{BSplinePatch, ControlGrid, KnotVector};
use crate::error::{Error, Result};
use crate::geom::{nearest_sq_distances, Point3, PointCloud};
use crate::metrics::{MetricsReport, TRIM_EPSILON};
use crate::pipeline::{FittedPatch, SurfacePatchSet};
use crate::primitives::{Chart, Cone, Cylinder, Plane, PrimitivePatch, Sphere};

/// Default UV resolution of exported meshes.
pub const MESH_GRID: usize = 40;
const KNOT_TOLERANCE: f64 = 1e-9;

/// Parses "x y z" or "x y z nx ny nz" lines; blank lines and lines starting
/// with '#' are skipped. Normals are normalized; every line must have the
/// same number of fields.
pub fn parse_point_cloud<R: Read>(reader: R) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::Parse {
                line: k + 1,
                message: format!("expected 3 or 6 values, got {}", vals.len()),
            });
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Parse {
                line: k + 1,
                message: "inconsistent number of values per line".into(),
            });
        }
        positions.push(Point3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            let n = Point3::new(vals[3], vals[4], vals[5]);
            let len = n.norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::Parse {
                    line: k + 1,
                    message: "normal has zero or non-finite length".into(),
                });
            }
            normals.push(n / len);
        }
    }
    PointCloud::new(positions, (width == Some(6)).then_some(normals))
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_point_cloud(fs::File::open(path)?)
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        match &cloud.normals {
            Some(n) => {
                let n = n[i];
                let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
            }
            None => {
                let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
            }
        }
    }
    out
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, format_point_cloud(cloud))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplineParams {
    grid_rows: usize,
    grid_cols: usize,
    closed_u: bool,
    closed_v: bool,
    control_points: Vec<Point3>,
    knots_u: Vec<f64>,
    knots_v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
enum PatchParams {
    Plane(Plane),
    Sphere(Sphere),
    Cylinder(Cylinder),
    Cone(Cone),
    OpenBspline(SplineParams),
    ClosedBspline(SplineParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatchRecord {
    #[serde(flatten)]
    params: PatchParams,
    point_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchSetFile {
    patches: Vec<PatchRecord>,
    #[serde(default)]
    config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsReport>,
}

fn spline_params(b: &BSplinePatch) -> SplineParams {
    SplineParams {
        grid_rows: b.grid().rows(),
        grid_cols: b.grid().cols(),
        closed_u: b.closed_u(),
        closed_v: b.closed_v(),
        control_points: b.grid().points().to_vec(),
        knots_u: b.knots_u().values().to_vec(),
        knots_v: b.knots_v().values().to_vec(),
    }
}

fn check_knots(given: &[f64], expected: &KnotVector, direction: char) -> Result<()> {
    let e = expected.values();
    if given.len() != e.len() || given.iter().zip(e).any(|(a, b)| (a - b).abs() > KNOT_TOLERANCE) {
        return Err(Error::InvalidArgument(format!(
            "knots_{direction} must be the uniform knot vector for the grid size"
        )));
    }
    Ok(())
}

fn spline_from_params(p: SplineParams, closed_kind: bool) -> Result<BSplinePatch> {
    if closed_kind != (p.closed_u || p.closed_v) {
        return Err(Error::InvalidArgument(
            "B-spline kind disagrees with its closed flags".into(),
        ));
    }
    let grid = ControlGrid::new(p.grid_rows, p.grid_cols, p.control_points, p.closed_u, p.closed_v)?;
    let ku = KnotVector::for_direction(p.grid_rows, p.closed_u)?;
    let kv = KnotVector::for_direction(p.grid_cols, p.closed_v)?;
    check_knots(&p.knots_u, &ku, 'u')?;
    check_knots(&p.knots_v, &kv, 'v')?;
    BSplinePatch::with_knots(grid, ku, kv)
}

fn to_record(f: &FittedPatch) -> PatchRecord {
    let params = match &f.patch {
        PrimitivePatch::Plane(p) => PatchParams::Plane(*p),
        PrimitivePatch::Sphere(s) => PatchParams::Sphere(*s),
        PrimitivePatch::Cylinder(c) => PatchParams::Cylinder(*c),
        PrimitivePatch::Cone(c) => PatchParams::Cone(*c),
        PrimitivePatch::BSpline(b) if b.closed_u() || b.closed_v() => PatchParams::ClosedBspline(spline_params(b)),
        PrimitivePatch::BSpline(b) => PatchParams::OpenBspline(spline_params(b)),
    };
    PatchRecord {
        params,
        point_indices: f.point_indices.clone(),
    }
}

fn from_record(r: PatchRecord) -> Result<FittedPatch> {
    let patch = match r.params {
        PatchParams::Plane(p) => PrimitivePatch::Plane(p),
        PatchParams::Sphere(s) => PrimitivePatch::Sphere(s),
        PatchParams::Cylinder(c) => PrimitivePatch::Cylinder(c),
        PatchParams::Cone(c) => PrimitivePatch::Cone(c),
        PatchParams::OpenBspline(p) => PrimitivePatch::BSpline(spline_from_params(p, false)?),
        PatchParams::ClosedBspline(p) => PrimitivePatch::BSpline(spline_from_params(p, true)?),
    };
    patch.validate()?;
    Ok(FittedPatch {
        patch,
        point_indices: r.point_indices,
    })
}

pub fn patch_set_to_json(set: &SurfacePatchSet) -> Result<String> {
    let file = PatchSetFile {
        patches: set.patches.iter().map(to_record).collect(),
        config: set.config.clone(),
        metrics: set.metrics.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn patch_set_from_json(text: &str) -> Result<SurfacePatchSet> {
    let file: PatchSetFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(SurfacePatchSet {
        patches: file.patches.into_iter().map(from_record).collect::<Result<_>>()?,
        config: file.config,
        metrics: file.metrics,
    })
}

pub fn write_patch_set(path: impl AsRef<Path>, set: &SurfacePatchSet) -> Result<()> {
    Ok(fs::write(path, patch_set_to_json(set)?)?)
}

pub fn read_patch_set(path: impl AsRef<Path>) -> Result<SurfacePatchSet> {
    patch_set_from_json(&fs::read_to_string(path)?)
}

/// ASCII OBJ with one object per patch. Each patch is sampled on a
/// `grid`×`grid` vertex lattice over its chart; quads with a vertex farther
/// than the trim threshold from the patch's points are dropped.
pub fn patches_to_obj(set: &SurfacePatchSet, points: &[Point3], grid: usize) -> Result<String> {
    if grid < 2 {
        return Err(Error::InvalidArgument(
            "mesh grid needs at least 2 samples per side".into(),
        ));
    }
    let mut out = String::new();
    let mut offset = 1usize;
    for (k, f) in set.patches.iter().enumerate() {
        let segment: Vec<Point3> = f
            .point_indices
            .iter()
            .map(|&i| {
                points.get(i).copied().ok_or(Error::DimensionMismatch {
                    expected: points.len(),
                    got: i + 1,
                })
            })
            .collect::<Result<_>>()?;
        if segment.is_empty() {
            continue;
        }
        let chart = Chart::around(&f.patch, &segment, TRIM_EPSILON)?;
        let step = 1.0 / (grid - 1) as f64;
        let verts: Vec<Point3> = (0..grid * grid)
            .map(|idx| chart.point((idx / grid) as f64 * step, (idx % grid) as f64 * step))
            .collect();
        let keep: Vec<bool> = nearest_sq_distances(&verts, &segment)
            .into_iter()
            .map(|d| d <= TRIM_EPSILON * TRIM_EPSILON)
            .collect();
        let _ = writeln!(out, "o patch_{k}_{}", f.kind());
        for v in &verts {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for i in 0..grid - 1 {
            for j in 0..grid - 1 {
                let q = [
                    i * grid + j,
                    (i + 1) * grid + j,
                    (i + 1) * grid + j + 1,
                    i * grid + j + 1,
                ];
                if q.iter().all(|&c| keep[c]) {
                    let _ = writeln!(
                        out,
                        "f {} {} {} {}",
                        q[0] + offset,
                        q[1] + offset,
                        q[2] + offset,
                        q[3] + offset
                    );
                }
            }
        }
        offset += verts.len();
    }
    Ok(out)
}
