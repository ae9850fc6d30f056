//! Post-fit refinement of B-spline patches: UV matching against the segment,
//! as-rigid-as-possible deformation of a sampled quad mesh, control-point
//! re-estimation and control-grid resolution adjustment.

use nalgebra::{DMatrix, Matrix3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;

use crate::assignment::{solve_assignment, CostMatrix};
use crate::bspline::{fit_control_grid, BSplinePatch};
use crate::error::{Error, Result};
use crate::geom::{nearest, symmetric_chamfer, Point3};

/// Side of the UV sample grid used for matching and Chamfer measurement.
pub const MATCH_GRID: usize = 40;
pub const DEFAULT_ARAP_ITERATIONS: usize = 10;
/// Soft-target weight used when a fully closed patch has no boundary.
pub const CLOSED_SOFT_WEIGHT: f64 = 0.1;

/// Quad tessellation of a UV sample grid, vertex `i * cols + j` at `(u_i, v_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadMesh {
    pub vertices: Vec<Point3>,
    pub uv: Vec<[f64; 2]>,
    pub quads: Vec<[usize; 4]>,
    pub boundary_mask: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
    pub closed_u: bool,
    pub closed_v: bool,
}

impl QuadMesh {
    /// Samples `patch` on a `rows`×`cols` UV grid and connects neighbors.
    pub fn from_patch(patch: &BSplinePatch, rows: usize, cols: usize) -> Result<Self> {
        let samples = patch.sample_uniform(rows, cols)?;
        let (uv, vertices) = samples.into_iter().map(|s| (s.uv, s.position)).unzip();
        Self::grid(rows, cols, vertices, uv, patch.closed_u(), patch.closed_v())
    }

    /// Grid topology over given vertices; closed directions wrap around.
    pub fn grid(
        rows: usize,
        cols: usize,
        vertices: Vec<Point3>,
        uv: Vec<[f64; 2]>,
        closed_u: bool,
        closed_v: bool,
    ) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::GridTooSmall { rows, cols });
        }
        if vertices.len() != rows * cols || uv.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: vertices.len().min(uv.len()),
            });
        }
        let idx = |i: usize, j: usize| (i % rows) * cols + j % cols;
        let qu = if closed_u { rows } else { rows - 1 };
        let qv = if closed_v { cols } else { cols - 1 };
        let mut quads = Vec::with_capacity(qu * qv);
        for i in 0..qu {
            for j in 0..qv {
                quads.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        let boundary_mask = (0..rows * cols)
            .map(|k| {
                let (i, j) = (k / cols, k % cols);
                (!closed_u && (i == 0 || i == rows - 1)) || (!closed_v && (j == 0 || j == cols - 1))
            })
            .collect();
        Ok(Self {
            vertices,
            uv,
            quads,
            boundary_mask,
            rows,
            cols,
            closed_u,
            closed_v,
        })
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&k| self.boundary_mask[k]).collect()
    }

    /// Each quad split along its first diagonal.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.quads
            .iter()
            .flat_map(|&[a, b, c, d]| [[a, b, c], [a, c, d]])
            .collect()
    }

    /// Sorted one-ring neighbors of every vertex in the triangulation.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for t in self.triangles() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if a != b {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }
}

/// Output of an ARAP solve.
#[derive(Debug, Clone)]
pub struct ArapResult {
    pub vertices: Vec<Point3>,
    /// Energy after the initial local step and after every alternation.
    pub energies: Vec<f64>,
}

/// ARAP with hard pivots only.
pub fn arap_deform(mesh: &QuadMesh, pivots: &[usize], targets: &[Point3], iterations: usize) -> Result<ArapResult> {
    arap_deform_soft(mesh, pivots, targets, &[], 0.0, iterations)
}

/// ARAP with hard pivots and weighted soft targets.
///
/// Minimizes `Σᵢ Σⱼ∈N(i) ‖(p'ᵢ − p'ⱼ) − Rᵢ(pᵢ − pⱼ)‖² + w Σₖ ‖p'ₖ − tₖ‖²` with
/// uniform edge weights, alternating optimal per-vertex rotations with an
/// exact sparse solve for positions. Pivots are substituted out of the
/// linear system.
pub fn arap_deform_soft(
    mesh: &QuadMesh,
    pivots: &[usize],
    targets: &[Point3],
    soft: &[(usize, Point3)],
    soft_weight: f64,
    iterations: usize,
) -> Result<ArapResult> {
    let n = mesh.vertices.len();
    if pivots.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: pivots.len(),
            got: targets.len(),
        });
    }
    let mut hard = vec![None; n];
    for (&p, t) in pivots.iter().zip(targets) {
        if p >= n {
            return Err(Error::InvalidArgument(format!(
                "pivot {p} out of range for {n} vertices"
            )));
        }
        if hard[p].replace(*t).is_some() {
            return Err(Error::InvalidArgument(format!("pivot {p} listed twice")));
        }
    }
    if !(soft_weight >= 0.0 && soft_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "soft weight must be nonnegative, got {soft_weight}"
        )));
    }
    let mut soft_target = vec![None; n];
    if soft_weight > 0.0 {
        for &(k, t) in soft {
            if k >= n {
                return Err(Error::InvalidArgument(format!(
                    "soft target {k} out of range for {n} vertices"
                )));
            }
            soft_target[k] = Some(t);
        }
    }

    let adj = mesh.neighbors();
    let rest = &mesh.vertices;
    let mut free_index = vec![usize::MAX; n];
    let free: Vec<usize> = (0..n).filter(|&k| hard[k].is_none()).collect();
    for (f, &k) in free.iter().enumerate() {
        free_index[k] = f;
    }

    // Start from the rest pose rigidly aligned to the constraints, which is
    // already the solution when the targets are a rigid motion.
    let anchors: Vec<(Point3, Point3)> = if pivots.is_empty() {
        (0..n).filter_map(|k| soft_target[k].map(|t| (rest[k], t))).collect()
    } else {
        pivots.iter().zip(targets).map(|(&k, t)| (rest[k], *t)).collect()
    };
    let (r0, t0) = rigid_alignment(&anchors);
    let mut current: Vec<Point3> = (0..n).map(|k| hard[k].unwrap_or(r0 * rest[k] + t0)).collect();
    let energy = |pos: &[Point3], rot: &[Matrix3<f64>]| -> f64 {
        let mut e = 0.0;
        for i in 0..n {
            for &j in &adj[i] {
                e += ((pos[i] - pos[j]) - rot[i] * (rest[i] - rest[j])).norm_squared();
            }
            if let Some(t) = soft_target[i] {
                e += soft_weight * (pos[i] - t).norm_squared();
            }
        }
        e
    };
    let fit_rotations = |pos: &[Point3]| -> Vec<Matrix3<f64>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut s = Matrix3::zeros();
                for &j in &adj[i] {
                    s += (rest[i] - rest[j]) * (pos[i] - pos[j]).transpose();
                }
                best_rotation(&s)
            })
            .collect()
    };

    let mut rotations = fit_rotations(&current);
    let mut energies = vec![energy(&current, &rotations)];
    if free.is_empty() {
        return Ok(ArapResult {
            vertices: current,
            energies,
        });
    }

    let m = free.len();
    let mut coo = CooMatrix::new(m, m);
    for (f, &i) in free.iter().enumerate() {
        let w = if soft_target[i].is_some() { soft_weight } else { 0.0 };
        coo.push(f, f, 2.0 * adj[i].len() as f64 + w);
        for &j in &adj[i] {
            if hard[j].is_none() {
                coo.push(f, free_index[j], -2.0);
            }
        }
    }
    let chol = CscCholesky::factor(&CscMatrix::from(&coo)).map_err(|_| {
        Error::Degenerate("ARAP system is singular: a mesh component has no pivot or soft target".into())
    })?;

    for _ in 0..iterations {
        let mut rhs = DMatrix::<f64>::zeros(m, 3);
        for (f, &i) in free.iter().enumerate() {
            let mut b = Point3::zeros();
            for &j in &adj[i] {
                b += (rotations[i] + rotations[j]) * (rest[i] - rest[j]);
                if let Some(t) = hard[j] {
                    b += t * 2.0;
                }
            }
            if let Some(t) = soft_target[i] {
                b += t * soft_weight;
            }
            for c in 0..3 {
                rhs[(f, c)] = b[c];
            }
        }
        let x = chol.solve(&rhs);
        for (f, &i) in free.iter().enumerate() {
            current[i] = Point3::new(x[(f, 0)], x[(f, 1)], x[(f, 2)]);
        }
        rotations = fit_rotations(&current);
        energies.push(energy(&current, &rotations));
    }
    Ok(ArapResult {
        vertices: current,
        energies,
    })
}

/// Least-squares rigid motion `x -> R x + t` taking each `.0` to its `.1`.
/// Falls back to the identity with a centroid shift when the sources do not
/// span a plane.
fn rigid_alignment(pairs: &[(Point3, Point3)]) -> (Matrix3<f64>, Point3) {
    if pairs.is_empty() {
        return (Matrix3::identity(), Point3::zeros());
    }
    let inv = 1.0 / pairs.len() as f64;
    let cs = pairs.iter().map(|p| p.0).sum::<Point3>() * inv;
    let ct = pairs.iter().map(|p| p.1).sum::<Point3>() * inv;
    let mut s = Matrix3::zeros();
    for (a, b) in pairs {
        s += (a - cs) * (b - ct).transpose();
    }
    let sv = s.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let r = if sorted[1] > 1e-12 * sorted[0].max(f64::MIN_POSITIVE) {
        best_rotation(&s)
    } else {
        Matrix3::identity()
    };
    (r, ct - r * cs)
}

/// Rotation maximizing `tr(R S)`, i.e. the best fit of `R eᵢⱼ` to `e'ᵢⱼ`.
fn best_rotation(s: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = s.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = v_t.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(2, |(k, _)| k);
        let mut v = v_t.transpose();
        v.column_mut(smallest).neg_mut();
        r = v * u.transpose();
    }
    r
}

/// One segment point matched to a UV sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UvMatch {
    pub segment_index: usize,
    pub sample_index: usize,
    pub point: Point3,
    pub uv: [f64; 2],
}

/// Maximal matching between the patch's 40×40 UV samples and the segment.
#[derive(Debug, Clone)]
pub struct UvMatching {
    pub mesh: QuadMesh,
    pub matches: Vec<UvMatch>,
    pub total_cost: f64,
}

/// Matches the patch's UV sample grid to `segment` by minimum total squared
/// distance; matched points inherit their sample's uv.
pub fn match_uv_by_assignment(patch: &BSplinePatch, segment: &[Point3]) -> Result<UvMatching> {
    let mesh = QuadMesh::from_patch(patch, MATCH_GRID, MATCH_GRID)?;
    match_mesh(mesh, segment)
}

fn match_mesh(mesh: QuadMesh, segment: &[Point3]) -> Result<UvMatching> {
    if segment.is_empty() {
        return Err(Error::Empty("segment"));
    }
    let costs = CostMatrix::from_fn(mesh.vertices.len(), segment.len(), |r, c| {
        (mesh.vertices[r] - segment[c]).norm_squared()
    })?;
    let assignment = solve_assignment(&costs)?;
    let matches = assignment
        .pairs
        .iter()
        .map(|&(s, p)| UvMatch {
            segment_index: p,
            sample_index: s,
            point: segment[p],
            uv: mesh.uv[s],
        })
        .collect();
    Ok(UvMatching {
        mesh,
        matches,
        total_cost: assignment.total_cost,
    })
}

/// Least-squares patch through matched `(point, uv)` pairs.
pub fn refit_from_matches(
    matches: &[(Point3, [f64; 2])],
    rows: usize,
    cols: usize,
    closed_u: bool,
    closed_v: bool,
) -> Result<BSplinePatch> {
    let samples: Vec<([f64; 2], Point3)> = matches.iter().map(|(p, uv)| (*uv, *p)).collect();
    BSplinePatch::new(fit_control_grid(&samples, rows, cols, closed_u, closed_v)?)
}

/// Settings for [`refine_to_tolerance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitToleranceConfig {
    pub tolerance: f64,
    pub min_grid: usize,
    pub max_grid: usize,
}

impl Default for FitToleranceConfig {
    fn default() -> Self {
        Self {
            tolerance: 5e-4,
            min_grid: 4,
            max_grid: 160,
        }
    }
}

impl FitToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.min_grid < 4 || self.max_grid < self.min_grid {
            return Err(Error::InvalidArgument(format!(
                "grid bounds must satisfy 4 <= min_grid <= max_grid, got {}..{}",
                self.min_grid, self.max_grid
            )));
        }
        Ok(())
    }
}

/// Result of [`refine_to_tolerance`].
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub patch: BSplinePatch,
    pub chamfer: f64,
    pub initial_chamfer: f64,
    /// True when `chamfer <= tolerance`.
    pub success: bool,
    /// Grid sizes fitted, in order.
    pub visited: Vec<(usize, usize)>,
}

/// Symmetric Chamfer distance between the segment and the patch's 40×40 samples.
pub fn patch_chamfer(patch: &BSplinePatch, segment: &[Point3]) -> Result<f64> {
    Ok(symmetric_chamfer(
        segment,
        &patch.sample_positions(MATCH_GRID, MATCH_GRID)?,
    ))
}

/// UV parameters for every segment point.
///
/// Matched points start from their sample's uv, the rest from the uv of the
/// nearest sample; each is then projected onto the patch to undo the grid
/// quantization.
fn parametrize(patch: &BSplinePatch, segment: &[Point3]) -> Result<Vec<(Point3, [f64; 2])>> {
    let matching = match_uv_by_assignment(patch, segment)?;
    let mut start: Vec<Option<[f64; 2]>> = vec![None; segment.len()];
    for m in &matching.matches {
        start[m.segment_index] = Some(m.uv);
    }
    Ok(segment
        .par_iter()
        .zip(start.par_iter())
        .map(|(p, s)| {
            let uv0 = s.unwrap_or_else(|| {
                let (k, _) = nearest(p, &matching.mesh.vertices).expect("mesh has vertices");
                matching.mesh.uv[k]
            });
            (*p, patch.project(p, uv0))
        })
        .collect())
}

/// Pulls the patch toward the segment: ARAP deformation of its sample mesh
/// with matched boundary vertices as pivots, then least-squares
/// re-estimation of the control grid from the deformed mesh.
pub fn optimize_coverage(patch: &BSplinePatch, segment: &[Point3]) -> Result<BSplinePatch> {
    let matching = match_uv_by_assignment(patch, segment)?;
    let mesh = &matching.mesh;
    let mut matched: Vec<Option<Point3>> = vec![None; mesh.vertices.len()];
    for m in &matching.matches {
        matched[m.sample_index] = Some(m.point);
    }
    let deformed = if mesh.closed_u && mesh.closed_v {
        let soft: Vec<(usize, Point3)> = matched
            .iter()
            .enumerate()
            .filter_map(|(k, t)| t.map(|t| (k, t)))
            .collect();
        arap_deform_soft(mesh, &[], &[], &soft, CLOSED_SOFT_WEIGHT, DEFAULT_ARAP_ITERATIONS)
    } else {
        let pivots: Vec<usize> = mesh
            .boundary_vertices()
            .into_iter()
            .filter(|&k| matched[k].is_some())
            .collect();
        if pivots.is_empty() {
            return Ok(patch.clone());
        }
        let targets: Vec<Point3> = pivots.iter().map(|&k| matched[k].expect("filtered")).collect();
        arap_deform(mesh, &pivots, &targets, DEFAULT_ARAP_ITERATIONS)
    }?;
    let pairs: Vec<(Point3, [f64; 2])> = deformed.vertices.into_iter().zip(mesh.uv.iter().copied()).collect();
    let grid = patch.grid();
    refit_from_matches(&pairs, grid.rows(), grid.cols(), patch.closed_u(), patch.closed_v())
}

/// Adjusts the control-grid resolution until the Chamfer distance to the
/// segment meets `config.tolerance`.
///
/// After one coverage optimization pass, segment points are parametrized on
/// the patch and the grid is refitted. A grid that meets the tolerance is
/// halved per direction while it still does (not below `min_grid`); one that
/// misses is doubled (up to `max_grid`), re-parametrizing on the latest fit
/// each time. If the tolerance is never met the best fit is returned with
/// `success == false`. Fits that become underdetermined end the search.
pub fn refine_to_tolerance(
    patch: &BSplinePatch,
    segment: &[Point3],
    config: &FitToleranceConfig,
) -> Result<RefineOutcome> {
    config.validate()?;
    if segment.is_empty() {
        return Err(Error::Empty("segment"));
    }
    let (cu, cv) = (patch.closed_u(), patch.closed_v());
    let initial_chamfer = patch_chamfer(patch, segment)?;
    let optimized = optimize_coverage(patch, segment).unwrap_or_else(|_| patch.clone());
    let start = (patch.grid().rows(), patch.grid().cols());
    let clamp = |x: usize| x.clamp(config.min_grid, config.max_grid);

    let mut params = parametrize(&optimized, segment)?;
    // Scattered or noisy segments can leave the refit underdetermined; the
    // optimized patch then serves as the starting fit.
    let first = refit_from_matches(&params, start.0, start.1, cu, cv).unwrap_or_else(|_| optimized.clone());
    let first_cd = patch_chamfer(&first, segment)?;
    let mut visited = vec![start];
    let mut best = (first, first_cd);

    if first_cd <= config.tolerance {
        let mut size = start;
        while size.0 > config.min_grid || size.1 > config.min_grid {
            let next = (clamp(size.0 / 2), clamp(size.1 / 2));
            let Ok(fit) = refit_from_matches(&params, next.0, next.1, cu, cv) else {
                break;
            };
            visited.push(next);
            let cd = patch_chamfer(&fit, segment)?;
            if cd > config.tolerance {
                break;
            }
            best = (fit, cd);
            size = next;
        }
    } else {
        let mut size = start;
        while size.0 < config.max_grid || size.1 < config.max_grid {
            let next = (clamp(size.0 * 2), clamp(size.1 * 2));
            let Ok(fit) = refit_from_matches(&params, next.0, next.1, cu, cv) else {
                break;
            };
            visited.push(next);
            let cd = patch_chamfer(&fit, segment)?;
            if cd < best.1 {
                best = (fit.clone(), cd);
            }
            if cd <= config.tolerance {
                break;
            }
            size = next;
            // Parameters from the finer fit feed the next resolution.
            if let Ok(p) = parametrize(&fit, segment) {
                params = p;
            }
        }
        // Never hand back something worse than the caller's patch.
        if best.1 > initial_chamfer {
            best = (patch.clone(), initial_chamfer);
        }
    }
    let (patch, chamfer) = best;
    Ok(RefineOutcome {
        success: chamfer <= config.tolerance,
        patch,
        chamfer,
        initial_chamfer,
        visited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::ControlGrid;

    fn flat_patch(rows: usize, cols: usize, cu: bool) -> BSplinePatch {
        let pts = (0..rows * cols)
            .map(|k| Point3::new((k / cols) as f64, (k % cols) as f64, 0.0))
            .collect();
        BSplinePatch::new(ControlGrid::new(rows, cols, pts, cu, false).unwrap()).unwrap()
    }

    #[test]
    fn mesh_topology() {
        let open = QuadMesh::from_patch(&flat_patch(4, 4, false), 5, 6).unwrap();
        assert_eq!(open.quads.len(), 4 * 5);
        assert_eq!(open.boundary_vertices().len(), 2 * 6 + 2 * 3);
        let closed = QuadMesh::from_patch(&flat_patch(4, 4, true), 5, 6).unwrap();
        assert_eq!(closed.quads.len(), 5 * 5);
        assert_eq!(closed.boundary_vertices().len(), 2 * 5);
        let interior = open.neighbors()[6 + 1].len();
        assert_eq!(interior, 6);
    }

    #[test]
    fn arap_argument_errors() {
        let mesh = QuadMesh::from_patch(&flat_patch(4, 4, false), 4, 4).unwrap();
        assert!(arap_deform(&mesh, &[99], &[Point3::zeros()], 1).is_err());
        assert!(arap_deform(&mesh, &[0, 1], &[Point3::zeros()], 1).is_err());
        assert!(arap_deform(&mesh, &[], &[], 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FitToleranceConfig::default().validate().is_ok());
        let bad = FitToleranceConfig {
            min_grid: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
