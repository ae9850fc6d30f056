//! Sequential RANSAC baseline for planes, spheres, cylinders and cones.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{bbox_diagonal, Point3, PointCloud};
use crate::primitives::{fit_primitive, Cone, Cylinder, Plane, PrimitiveKind, PrimitivePatch, Sphere};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Largest point-to-surface distance of an inlier.
    pub inlier_epsilon: f64,
    /// Largest angle in radians between a point normal and the surface normal.
    pub normal_epsilon: f64,
    pub min_inliers: usize,
    pub max_candidates_per_round: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_epsilon: 0.01,
            normal_epsilon: 0.3,
            min_inliers: 50,
            max_candidates_per_round: 1000,
            restarts: 3,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_epsilon > 0.0) {
            return Err(Error::InvalidArgument("inlier_epsilon must be positive".into()));
        }
        if !(self.normal_epsilon > 0.0) {
            return Err(Error::InvalidArgument("normal_epsilon must be positive".into()));
        }
        if self.min_inliers < 6 {
            return Err(Error::InvalidArgument("min_inliers must be at least 6".into()));
        }
        if self.max_candidates_per_round == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "candidate budget and restarts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted primitive and the points it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub patch: PrimitivePatch,
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub detections: Vec<Detection>,
    /// Fraction of input points assigned to some detection.
    pub coverage: f64,
    /// Index of the restart that produced this result.
    pub run: usize,
}

/// Candidates are scored on at most this many remaining points before the
/// winner is rescored on all of them.
const SCORE_SUBSET: usize = 2000;
/// Draws allowed when looking for a partner point near the first sample.
const LOCAL_TRIES: usize = 20;
/// Neighborhood radius for localized sampling, relative to the cloud diagonal.
const LOCAL_RADIUS: f64 = 0.15;
const REFIT_ROUNDS: usize = 3;
/// A simpler kind replaces the winner if it keeps this share of its inliers.
const SIMPLER_SHARE: f64 = 0.95;
/// Inlier connectivity radius in multiples of the typical point spacing.
const LINK_SPACINGS: f64 = 4.0;
const SPACING_PROBES: usize = 200;

/// Unit surface normal of `patch` nearest to `p` (sign arbitrary).
fn surface_normal(patch: &PrimitivePatch, p: &Point3) -> Option<Point3> {
    let n = match patch {
        PrimitivePatch::Plane(x) => x.normal,
        PrimitivePatch::Sphere(x) => p - x.center,
        PrimitivePatch::Cylinder(x) => {
            let w = p - x.center;
            w - x.direction * w.dot(&x.direction)
        }
        PrimitivePatch::Cone(x) => {
            let v = p - x.apex;
            let h = v.dot(&x.direction);
            let radial = v - x.direction * h;
            let rho = radial.norm();
            if rho == 0.0 {
                return None;
            }
            let (s, c) = x.half_angle.sin_cos();
            radial / rho * c - x.direction * s
        }
        PrimitivePatch::BSpline(_) => return None,
    };
    let len = n.norm();
    (len > 0.0).then(|| n / len)
}

struct Scorer<'a> {
    positions: &'a [Point3],
    normals: &'a [Point3],
    epsilon: f64,
    cos_limit: f64,
    /// Inliers closer than this are connected.
    link: f64,
}

impl Scorer<'_> {
    fn is_inlier(&self, patch: &PrimitivePatch, i: usize) -> bool {
        let p = &self.positions[i];
        let d = match patch {
            PrimitivePatch::Plane(x) => x.distance(p),
            PrimitivePatch::Sphere(x) => x.distance(p),
            PrimitivePatch::Cylinder(x) => x.distance(p),
            PrimitivePatch::Cone(x) => x.distance(p),
            PrimitivePatch::BSpline(_) => return false,
        };
        d <= self.epsilon && surface_normal(patch, p).is_some_and(|n| n.dot(&self.normals[i]).abs() >= self.cos_limit)
    }

    fn count(&self, patch: &PrimitivePatch, indices: &[usize]) -> usize {
        indices.iter().filter(|&&i| self.is_inlier(patch, i)).count()
    }

    /// Largest connected component of the inliers among `indices`.
    fn inliers(&self, patch: &PrimitivePatch, indices: &[usize]) -> Vec<usize> {
        let all: Vec<usize> = indices.iter().copied().filter(|&i| self.is_inlier(patch, i)).collect();
        largest_component(self.positions, &all, self.link)
    }
}

/// Largest connected component of `indices` under the "closer than `link`"
/// relation, returned in ascending index order.
fn largest_component(positions: &[Point3], indices: &[usize], link: f64) -> Vec<usize> {
    if indices.is_empty() || !(link > 0.0) {
        return indices.to_vec();
    }
    let cell = |p: &Point3| {
        (
            (p.x / link).floor() as i64,
            (p.y / link).floor() as i64,
            (p.z / link).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (k, &i) in indices.iter().enumerate() {
        grid.entry(cell(&positions[i])).or_default().push(k);
    }
    let link2 = link * link;
    let mut component = vec![usize::MAX; indices.len()];
    let mut best: (usize, usize) = (0, 0);
    let mut stack = Vec::new();
    for start in 0..indices.len() {
        if component[start] != usize::MAX {
            continue;
        }
        component[start] = start;
        stack.push(start);
        let mut size = 0;
        while let Some(k) = stack.pop() {
            size += 1;
            let p = positions[indices[k]];
            let (cx, cy, cz) = cell(&p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &m in bucket {
                            if component[m] == usize::MAX && (positions[indices[m]] - p).norm_squared() <= link2 {
                                component[m] = start;
                                stack.push(m);
                            }
                        }
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, start);
        }
    }
    indices
        .iter()
        .zip(&component)
        .filter(|&(_, &c)| c == best.1)
        .map(|(&i, _)| i)
        .collect()
}

/// Median nearest-neighbor spacing over a deterministic subset of points.
fn typical_spacing(positions: &[Point3]) -> f64 {
    let step = (positions.len() / SPACING_PROBES).max(1);
    let mut d: Vec<f64> = (0..positions.len())
        .step_by(step)
        .filter_map(|i| {
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (q - positions[i]).norm_squared())
                .min_by(f64::total_cmp)
        })
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2].sqrt()
}

fn plane_from_points(p: &[Point3]) -> Option<PrimitivePatch> {
    let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let normal = n / len;
    Some(PrimitivePatch::Plane(Plane {
        normal,
        offset: normal.dot(&p[0]),
    }))
}

fn sphere_from_points(p: &[Point3]) -> Option<PrimitivePatch> {
    // |x|² = 2 c·x + k through four points.
    let a = Matrix4::from_fn(|r, c| if c < 3 { 2.0 * p[r][c] } else { 1.0 });
    let b = Vector4::from_fn(|r, _| p[r].norm_squared());
    let x = a.lu().solve(&b)?;
    let center = Point3::new(x[0], x[1], x[2]);
    let r2 = x[3] + center.norm_squared();
    (r2 > 0.0 && r2.is_finite()).then(|| {
        PrimitivePatch::Sphere(Sphere {
            center,
            radius: r2.sqrt(),
        })
    })
}

fn cylinder_from_oriented(p: &[Point3], n: &[Point3]) -> Option<PrimitivePatch> {
    let axis = n[0].cross(&n[1]);
    let len = axis.norm();
    if len < 1e-6 {
        return None;
    }
    let axis = axis / len;
    // Closest points of the normal lines p_i + t n_i, projected across the axis.
    let proj = |v: &Point3| v - axis * v.dot(&axis);
    let (q0, q1, m0, m1) = (proj(&p[0]), proj(&p[1]), proj(&n[0]), proj(&n[1]));
    let w = q0 - q1;
    let (a, b, c) = (m0.dot(&m0), m0.dot(&m1), m1.dot(&m1));
    let (d, e) = (m0.dot(&w), m1.dot(&w));
    let den = a * c - b * b;
    if den.abs() < 1e-12 {
        return None;
    }
    let t0 = (b * e - c * d) / den;
    let t1 = (a * e - b * d) / den;
    let center = 0.5 * ((q0 + m0 * t0) + (q1 + m1 * t1));
    let radius = 0.5 * ((q0 - center).norm() + (q1 - center).norm());
    (radius > 0.0 && radius.is_finite()).then_some(PrimitivePatch::Cylinder(Cylinder {
        center,
        direction: axis,
        radius,
    }))
}

fn cone_from_oriented(p: &[Point3], n: &[Point3]) -> Option<PrimitivePatch> {
    // The apex lies on all three tangent planes.
    let a = Matrix3::from_rows(&[n[0].transpose(), n[1].transpose(), n[2].transpose()]);
    let b = Vector3::new(n[0].dot(&p[0]), n[1].dot(&p[1]), n[2].dot(&p[2]));
    let apex = a.lu().solve(&b)?;
    let dirs: Vec<Point3> = p
        .iter()
        .map(|x| (x - apex).try_normalize(1e-12))
        .collect::<Option<_>>()?;
    // The axis is normal to the plane through the three unit generator tips.
    let mut axis = (dirs[1] - dirs[0]).cross(&(dirs[2] - dirs[0])).try_normalize(1e-12)?;
    if axis.dot(&(dirs[0] + dirs[1] + dirs[2])) < 0.0 {
        axis = -axis;
    }
    let half_angle = dirs.iter().map(|d| d.dot(&axis).clamp(-1.0, 1.0).acos()).sum::<f64>() / 3.0;
    (half_angle > crate::primitives::MIN_HALF_ANGLE && half_angle < crate::primitives::MAX_HALF_ANGLE).then_some(
        PrimitivePatch::Cone(Cone {
            apex,
            direction: axis,
            half_angle,
        }),
    )
}

const MINIMAL_SET: [(PrimitiveKind, usize); 4] = [
    (PrimitiveKind::Plane, 3),
    (PrimitiveKind::Sphere, 4),
    (PrimitiveKind::Cylinder, 2),
    (PrimitiveKind::Cone, 3),
];

/// Draws `k` distinct remaining points, the later ones preferably within
/// `radius` of the first.
fn draw_local<R: Rng>(rng: &mut R, remaining: &[usize], positions: &[Point3], k: usize, radius: f64) -> Vec<usize> {
    let first = remaining[rng.random_range(0..remaining.len())];
    let mut chosen = vec![first];
    let r2 = radius * radius;
    while chosen.len() < k {
        let mut pick = None;
        for _ in 0..LOCAL_TRIES {
            let c = remaining[rng.random_range(0..remaining.len())];
            if !chosen.contains(&c) && (positions[c] - positions[first]).norm_squared() <= r2 {
                pick = Some(c);
                break;
            }
        }
        let c = pick.unwrap_or_else(|| remaining[rng.random_range(0..remaining.len())]);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen
}

fn candidate(kind: PrimitiveKind, idx: &[usize], positions: &[Point3], normals: &[Point3]) -> Option<PrimitivePatch> {
    let p: Vec<Point3> = idx.iter().map(|&i| positions[i]).collect();
    let n: Vec<Point3> = idx.iter().map(|&i| normals[i]).collect();
    match kind {
        PrimitiveKind::Plane => plane_from_points(&p),
        PrimitiveKind::Sphere => sphere_from_points(&p),
        PrimitiveKind::Cylinder => cylinder_from_oriented(&p, &n),
        PrimitiveKind::Cone => cone_from_oriented(&p, &n),
        _ => None,
    }
}

/// Least-squares refit on the inliers, repeated while the inlier set grows.
fn refine(scorer: &Scorer<'_>, mut patch: PrimitivePatch, remaining: &[usize]) -> (PrimitivePatch, Vec<usize>) {
    let mut inliers = scorer.inliers(&patch, remaining);
    for _ in 0..REFIT_ROUNDS {
        let pts: Vec<Point3> = inliers.iter().map(|&i| scorer.positions[i]).collect();
        let ns: Vec<Point3> = inliers.iter().map(|&i| scorer.normals[i]).collect();
        let Ok(refit) = fit_primitive(patch.kind(), &pts, Some(&ns)) else {
            break;
        };
        let next = scorer.inliers(&refit, remaining);
        if next.len() <= inliers.len() {
            break;
        }
        patch = refit;
        inliers = next;
    }
    (patch, inliers)
}

/// Swaps the winner for the least complex kind that, fitted to the winner's
/// inliers, still explains nearly as many points. Large spheres and
/// cylinders otherwise absorb noisy planes.
fn prefer_simpler(
    scorer: &Scorer<'_>,
    patch: PrimitivePatch,
    inliers: Vec<usize>,
    remaining: &[usize],
) -> (PrimitivePatch, Vec<usize>) {
    let pts: Vec<Point3> = inliers.iter().map(|&i| scorer.positions[i]).collect();
    let ns: Vec<Point3> = inliers.iter().map(|&i| scorer.normals[i]).collect();
    for (kind, _) in MINIMAL_SET {
        if kind == patch.kind() {
            break;
        }
        let Ok(simple) = fit_primitive(kind, &pts, Some(&ns)) else {
            continue;
        };
        let (simple, found) = refine(scorer, simple, remaining);
        if found.len() as f64 >= SIMPLER_SHARE * inliers.len() as f64 {
            return (simple, found);
        }
    }
    (patch, inliers)
}

fn run_once(cloud: &PointCloud, normals: &[Point3], config: &RansacConfig, seed: u64) -> Vec<Detection> {
    let positions = &cloud.positions;
    let scorer = Scorer {
        positions,
        normals,
        epsilon: config.inlier_epsilon,
        cos_limit: config.normal_epsilon.min(std::f64::consts::FRAC_PI_2).cos(),
        link: LINK_SPACINGS * typical_spacing(positions),
    };
    let radius = LOCAL_RADIUS * bbox_diagonal(positions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..positions.len()).collect();
    let mut out = Vec::new();
    while remaining.len() >= config.min_inliers {
        let subset: Vec<usize> = if remaining.len() > SCORE_SUBSET {
            let mut s: Vec<usize> = sample_indices(&mut rng, remaining.len(), SCORE_SUBSET)
                .into_iter()
                .map(|k| remaining[k])
                .collect();
            s.sort_unstable();
            s
        } else {
            remaining.clone()
        };
        let candidates: Vec<PrimitivePatch> = (0..config.max_candidates_per_round)
            .filter_map(|c| {
                let (kind, k) = MINIMAL_SET[c % MINIMAL_SET.len()];
                let idx = draw_local(&mut rng, &remaining, positions, k, radius);
                candidate(kind, &idx, positions, normals)
            })
            .collect();
        // Highest subset score wins; ties go to the earlier candidate.
        let best = candidates
            .par_iter()
            .enumerate()
            .map(|(i, c)| (scorer.count(c, &subset), i))
            .reduce(
                || (0, usize::MAX),
                |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
            );
        if best.1 == usize::MAX {
            break;
        }
        let chosen = candidates[best.1].clone();
        let (patch, inliers) = refine(&scorer, chosen.clone(), &remaining);
        let (patch, inliers) = if inliers.len() >= config.min_inliers {
            (patch, inliers)
        } else {
            let raw = scorer.inliers(&chosen, &remaining);
            (chosen, raw)
        };
        if inliers.len() < config.min_inliers {
            break;
        }
        let (patch, inliers) = prefer_simpler(&scorer, patch, inliers, &remaining);
        let mut taken = vec![false; positions.len()];
        for &i in &inliers {
            taken[i] = true;
        }
        remaining.retain(|&i| !taken[i]);
        out.push(Detection { patch, inliers });
    }
    out
}

/// Detects primitives one at a time, removing each one's inliers, and keeps
/// the restart that explains the most points.
pub fn detect_primitives(cloud: &PointCloud, config: &RansacConfig) -> Result<RansacResult> {
    config.validate()?;
    if cloud.positions.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let normals = cloud
        .normals
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("RANSAC needs per-point normals".into()))?;
    let mut best: Option<RansacResult> = None;
    for run in 0..config.restarts {
        let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(run as u64);
        let detections = run_once(cloud, normals, config, seed);
        let covered: usize = detections.iter().map(|d| d.inliers.len()).sum();
        let coverage = covered as f64 / cloud.len() as f64;
        log::debug!(
            "ransac run {run}: {} primitives, coverage {coverage:.4}",
            detections.len()
        );
        if best.as_ref().is_none_or(|b| coverage > b.coverage) {
            best = Some(RansacResult {
                detections,
                coverage,
                run,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}
