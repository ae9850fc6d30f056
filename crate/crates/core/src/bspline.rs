//! Cubic tensor-product B-spline patches.
//!
//! Open directions use clamped uniform knots on `[0, 1]`, so the surface
//! interpolates the corner control points. Closed directions use periodic
//! uniform knots with the seam at parameter 0; evaluation wraps the control
//! indices modulo the grid size, so the grid stores only distinct points.

use nalgebra::DMatrix;
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{principal_axes, Point3};

pub const DEGREE: usize = 3;

/// Side length of the standardized control grid.
pub const STANDARD_GRID: usize = 20;

/// Number of dense samples used when re-parametrizing a patch onto the
/// standard grid (a 60x60 parameter lattice).
pub const STANDARD_SAMPLES: usize = 3600;

/// Knot sequence of one parametric direction.
///
/// Clamped vectors hold the full `count + 4` knots. Periodic vectors hold the
/// `count + 1` uniform breakpoints `0, 1/count, ..., 1`; the extended knots
/// used for evaluation are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    values: Vec<f64>,
    periodic: bool,
}

impl KnotVector {
    pub fn clamped_uniform(count: usize) -> Result<Self> {
        if count < DEGREE + 1 {
            return Err(Error::InvalidArgument(format!(
                "a cubic clamped knot vector needs at least 4 control points, got {count}"
            )));
        }
        let spans = count - DEGREE;
        let mut values = Vec::with_capacity(count + DEGREE + 1);
        values.extend([0.0; DEGREE + 1]);
        for k in 1..spans {
            values.push(k as f64 / spans as f64);
        }
        values.extend([1.0; DEGREE + 1]);
        Ok(Self {
            values,
            periodic: false,
        })
    }

    pub fn periodic_uniform(count: usize) -> Result<Self> {
        if count < DEGREE + 1 {
            return Err(Error::InvalidArgument(format!(
                "a cubic periodic knot vector needs at least 4 control points, got {count}"
            )));
        }
        let values = (0..=count).map(|k| k as f64 / count as f64).collect();
        Ok(Self { values, periodic: true })
    }

    pub fn for_direction(count: usize, closed: bool) -> Result<Self> {
        if closed {
            Self::periodic_uniform(count)
        } else {
            Self::clamped_uniform(count)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Number of control points this knot vector serves.
    pub fn control_count(&self) -> usize {
        if self.periodic {
            self.values.len() - 1
        } else {
            self.values.len() - DEGREE - 1
        }
    }

    /// Knots of the equivalent non-periodic spline over `count + 3` wrapped controls.
    fn extended(&self) -> Vec<f64> {
        if !self.periodic {
            return self.values.clone();
        }
        let count = self.control_count() as f64;
        (0..self.control_count() + 2 * DEGREE + 1)
            .map(|k| (k as f64 - DEGREE as f64) / count)
            .collect()
    }

    fn check(&self, count: usize) -> Result<()> {
        let ok = self.control_count() == count && count > DEGREE;
        if !ok {
            return Err(Error::KnotMismatch {
                knots: self.values.len(),
                count,
            });
        }
        Ok(())
    }
}

/// Active basis values at one parameter: four consecutive (possibly wrapped)
/// control indices starting at `first`.
#[derive(Debug, Clone, Copy)]
struct ActiveBasis {
    first: usize,
    values: [f64; 4],
    derivs: [f64; 4],
}

/// Evaluator for one direction with precomputed extended knots.
#[derive(Debug, Clone)]
struct DirectionBasis {
    knots: Vec<f64>,
    count: usize,
    periodic: bool,
}

impl DirectionBasis {
    fn new(kv: &KnotVector) -> Self {
        Self {
            knots: kv.extended(),
            count: kv.control_count(),
            periodic: kv.periodic,
        }
    }

    fn index(&self, extended: usize) -> usize {
        if self.periodic {
            extended % self.count
        } else {
            extended
        }
    }

    fn span(&self, u: f64) -> usize {
        // Highest span index whose left knot is <= u, restricted to the domain.
        let last = self.knots.len() - DEGREE - 2;
        if u >= self.knots[last + 1] {
            return last;
        }
        let mut lo = DEGREE;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    fn active(&self, u: f64) -> ActiveBasis {
        let u = if self.periodic && u >= 1.0 { 0.0 } else { u };
        let span = self.span(u);
        let t = &self.knots;
        let mut n = [0.0f64; 4];
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        let mut quadratic = [0.0f64; 4];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
            if j == DEGREE - 1 {
                quadratic = n;
            }
        }
        // Degree-2 functions N_{span-2..=span}; neighbours outside are zero.
        let q = |k: isize| -> f64 {
            if (0..3).contains(&k) {
                quadratic[k as usize]
            } else {
                0.0
            }
        };
        let mut derivs = [0.0f64; 4];
        for (r, d) in derivs.iter_mut().enumerate() {
            let i = span + r - DEGREE;
            let a = t[i + DEGREE] - t[i];
            let b = t[i + DEGREE + 1] - t[i + 1];
            let ta = if a > 0.0 { q(r as isize - 1) / a } else { 0.0 };
            let tb = if b > 0.0 { q(r as isize) / b } else { 0.0 };
            *d = DEGREE as f64 * (ta - tb);
        }
        ActiveBasis {
            first: span - DEGREE,
            values: n,
            derivs,
        }
    }
}

fn check_param(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::ParameterOutOfDomain { value: u });
    }
    Ok(())
}

/// All `count` basis function values at `u`.
pub fn basis_functions(u: f64, knots: &KnotVector, count: usize) -> Result<Vec<f64>> {
    check_param(u)?;
    knots.check(count)?;
    let dir = DirectionBasis::new(knots);
    let act = dir.active(u);
    let mut out = vec![0.0; count];
    for (r, v) in act.values.iter().enumerate() {
        out[dir.index(act.first + r)] += v;
    }
    Ok(out)
}

/// P x Q lattice of control points stored row-major (`p * cols + q`).
///
/// Rows run along `u`, columns along `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    rows: usize,
    cols: usize,
    points: Vec<Point3>,
    pub closed_u: bool,
    pub closed_v: bool,
}

impl ControlGrid {
    pub fn new(rows: usize, cols: usize, points: Vec<Point3>, closed_u: bool, closed_v: bool) -> Result<Self> {
        if rows < DEGREE + 1 || cols < DEGREE + 1 {
            return Err(Error::GridTooSmall { rows, cols });
        }
        if points.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: points.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            points,
            closed_u,
            closed_v,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Point3] {
        &mut self.points
    }

    pub fn get(&self, p: usize, q: usize) -> Point3 {
        self.points[p * self.cols + q]
    }

    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
            ..self.clone()
        }
    }
}

/// A single surface sample with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvSample {
    pub uv: [f64; 2],
    pub position: Point3,
}

/// Degree-3 tensor-product B-spline surface.
#[derive(Debug, Clone)]
pub struct BSplinePatch {
    grid: ControlGrid,
    knots_u: KnotVector,
    knots_v: KnotVector,
    bases: DirectionBasisPair,
}

#[derive(Debug, Clone)]
struct DirectionBasisPair {
    u: DirectionBasis,
    v: DirectionBasis,
}

impl PartialEq for BSplinePatch {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.knots_u == other.knots_u && self.knots_v == other.knots_v
    }
}

impl BSplinePatch {
    /// Patch over `grid` with the default knot convention for its closed flags.
    pub fn new(grid: ControlGrid) -> Result<Self> {
        let knots_u = KnotVector::for_direction(grid.rows, grid.closed_u)?;
        let knots_v = KnotVector::for_direction(grid.cols, grid.closed_v)?;
        Self::with_knots(grid, knots_u, knots_v)
    }

    pub fn with_knots(grid: ControlGrid, knots_u: KnotVector, knots_v: KnotVector) -> Result<Self> {
        knots_u.check(grid.rows)?;
        knots_v.check(grid.cols)?;
        if knots_u.periodic != grid.closed_u || knots_v.periodic != grid.closed_v {
            return Err(Error::InvalidArgument(
                "knot periodicity must match the grid's closed flags".into(),
            ));
        }
        let bases = DirectionBasisPair {
            u: DirectionBasis::new(&knots_u),
            v: DirectionBasis::new(&knots_v),
        };
        Ok(Self {
            grid,
            knots_u,
            knots_v,
            bases,
        })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn knots_u(&self) -> &KnotVector {
        &self.knots_u
    }

    pub fn knots_v(&self) -> &KnotVector {
        &self.knots_v
    }

    pub fn closed_u(&self) -> bool {
        self.grid.closed_u
    }

    pub fn closed_v(&self) -> bool {
        self.grid.closed_v
    }

    /// Surface point at `(u, v)`.
    pub fn evaluate(&self, u: f64, v: f64) -> Result<Point3> {
        check_param(u)?;
        check_param(v)?;
        Ok(self.eval_unchecked(u, v))
    }

    pub(crate) fn eval_unchecked(&self, u: f64, v: f64) -> Point3 {
        self.eval_with_derivs(u, v).0
    }

    /// Position and first partial derivatives at `(u, v)`.
    pub(crate) fn eval_with_derivs(&self, u: f64, v: f64) -> (Point3, Point3, Point3) {
        let bases = &self.bases;
        let bu = bases.u.active(u);
        let bv = bases.v.active(v);
        let mut s = Point3::zeros();
        let mut su = Point3::zeros();
        let mut sv = Point3::zeros();
        for a in 0..4 {
            let p = bases.u.index(bu.first + a);
            for b in 0..4 {
                let q = bases.v.index(bv.first + b);
                let c = self.grid.get(p, q);
                s += c * (bu.values[a] * bv.values[b]);
                su += c * (bu.derivs[a] * bv.values[b]);
                sv += c * (bu.values[a] * bv.derivs[b]);
            }
        }
        (s, su, sv)
    }

    /// Uniform parameter lattice values for one direction.
    pub fn uniform_params(n: usize, closed: bool) -> Vec<f64> {
        if closed {
            (0..n).map(|i| i as f64 / n as f64).collect()
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        }
    }

    /// `nu * nv` samples on a uniform parameter lattice, `u` varying slowest.
    ///
    /// Closed directions omit the parameter 1, which duplicates the seam.
    pub fn sample_uniform(&self, nu: usize, nv: usize) -> Result<Vec<UvSample>> {
        if nu < 2 || nv < 2 {
            return Err(Error::InvalidArgument(format!(
                "sample lattice must be at least 2x2, got {nu}x{nv}"
            )));
        }
        let us = Self::uniform_params(nu, self.closed_u());
        let vs = Self::uniform_params(nv, self.closed_v());
        let mut out = Vec::with_capacity(nu * nv);
        for &u in &us {
            for &v in &vs {
                out.push(UvSample {
                    uv: [u, v],
                    position: self.eval_unchecked(u, v),
                });
            }
        }
        Ok(out)
    }

    /// Positions of `sample_uniform`.
    pub fn sample_positions(&self, nu: usize, nv: usize) -> Result<Vec<Point3>> {
        Ok(self.sample_uniform(nu, nv)?.into_iter().map(|s| s.position).collect())
    }

    /// Closest surface parameter to `point`, by damped Gauss-Newton from `start`.
    pub fn project(&self, point: &Point3, start: [f64; 2]) -> [f64; 2] {
        let wrap = |x: f64, closed: bool| {
            if closed {
                x.rem_euclid(1.0)
            } else {
                x.clamp(0.0, 1.0)
            }
        };
        let mut uv = [wrap(start[0], self.closed_u()), wrap(start[1], self.closed_v())];
        let (mut s, mut su, mut sv) = self.eval_with_derivs(uv[0], uv[1]);
        let mut err = (s - point).norm_squared();
        for _ in 0..20 {
            let r = s - point;
            let a11 = su.dot(&su);
            let a12 = su.dot(&sv);
            let a22 = sv.dot(&sv);
            let g1 = su.dot(&r);
            let g2 = sv.dot(&r);
            let det = a11 * a22 - a12 * a12;
            if !(det.abs() > 1e-300) {
                break;
            }
            let du = -(a22 * g1 - a12 * g2) / det;
            let dv = -(a11 * g2 - a12 * g1) / det;
            let mut step = 1.0;
            let mut improved = false;
            while step > 1e-4 {
                let cand = [
                    wrap(uv[0] + step * du, self.closed_u()),
                    wrap(uv[1] + step * dv, self.closed_v()),
                ];
                let (cs, csu, csv) = self.eval_with_derivs(cand[0], cand[1]);
                let cerr = (cs - point).norm_squared();
                if cerr < err {
                    uv = cand;
                    s = cs;
                    su = csu;
                    sv = csv;
                    let gain = err - cerr;
                    err = cerr;
                    improved = gain > 1e-18 * (1.0 + err);
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        uv
    }
}

/// Sparse design-matrix row: up to 16 (control index, weight) entries.
fn design_row(u: &DirectionBasis, v: &DirectionBasis, cols: usize, uv: [f64; 2]) -> Vec<(usize, f64)> {
    let bu = u.active(uv[0]);
    let bv = v.active(uv[1]);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(16);
    for a in 0..4 {
        let p = u.index(bu.first + a);
        for b in 0..4 {
            let q = v.index(bv.first + b);
            let w = bu.values[a] * bv.values[b];
            if w == 0.0 {
                continue;
            }
            let idx = p * cols + q;
            match row.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 += w,
                None => row.push((idx, w)),
            }
        }
    }
    row
}

/// Least-squares control grid reproducing `(uv, target)` samples.
///
/// The normal equations are factored with a sparse Cholesky decomposition;
/// if that fails or its pivots indicate ill-conditioning, a column-pivoted QR
/// of the design matrix determines the rank and solves the system.
pub fn fit_control_grid(
    samples: &[([f64; 2], Point3)],
    rows: usize,
    cols: usize,
    closed_u: bool,
    closed_v: bool,
) -> Result<ControlGrid> {
    if rows < DEGREE + 1 || cols < DEGREE + 1 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    let unknowns = rows * cols;
    if samples.len() < unknowns {
        return Err(Error::InsufficientSamples {
            required: unknowns,
            got: samples.len(),
        });
    }
    for (uv, target) in samples {
        check_param(uv[0])?;
        check_param(uv[1])?;
        if !target.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("fit targets"));
        }
    }
    let ku = DirectionBasis::new(&KnotVector::for_direction(rows, closed_u)?);
    let kv = DirectionBasis::new(&KnotVector::for_direction(cols, closed_v)?);
    if single_span(samples.iter().map(|s| s.0[0]), &ku) || single_span(samples.iter().map(|s| s.0[1]), &kv) {
        return Err(Error::Degenerate("parameter values fall in a single knot span".into()));
    }

    let design: Vec<Vec<(usize, f64)>> = samples.iter().map(|(uv, _)| design_row(&ku, &kv, cols, *uv)).collect();

    let mut coo = CooMatrix::new(unknowns, unknowns);
    let mut rhs = DMatrix::<f64>::zeros(unknowns, 3);
    let mut diag = vec![0.0f64; unknowns];
    for (row, (_, target)) in design.iter().zip(samples) {
        for &(i, wi) in row {
            diag[i] += wi * wi;
            for c in 0..3 {
                rhs[(i, c)] += wi * target[c];
            }
            for &(j, wj) in row {
                coo.push(i, j, wi * wj);
            }
        }
    }
    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|&d| d <= 1e-14 * max_diag) {
        // A control point with no support can never be determined.
        return Err(Error::RankDeficient {
            rank: diag.iter().filter(|&&d| d > 1e-14 * max_diag).count(),
            unknowns,
        });
    }
    let normal = CscMatrix::from(&coo);

    let solution = match CscCholesky::factor(&normal) {
        Ok(chol) if well_conditioned(&chol, max_diag) => chol.solve(&rhs),
        _ => solve_by_pivoted_qr(&design, samples, unknowns)?,
    };

    let points = (0..unknowns)
        .map(|i| Point3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]))
        .collect();
    ControlGrid::new(rows, cols, points, closed_u, closed_v)
}

/// Least-squares control grid with a smoothness penalty, for scattered
/// samples that leave parts of the grid poorly determined.
///
/// Minimizes `‖A c − x‖² + λ ‖D c‖²` where `D` stacks the second differences
/// of the control grid along u and v and its mixed (twist) differences,
/// wrapping across closed directions. `λ = smoothing · mean(diag AᵀA)`, so
/// `smoothing` is relative to the data weight per control point. The penalty
/// vanishes on affine grids, so planar data is reproduced exactly.
pub fn fit_control_grid_smooth(
    samples: &[([f64; 2], Point3)],
    rows: usize,
    cols: usize,
    closed_u: bool,
    closed_v: bool,
    smoothing: f64,
) -> Result<ControlGrid> {
    if rows < DEGREE + 1 || cols < DEGREE + 1 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    if !(smoothing > 0.0) || !smoothing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be positive, got {smoothing}"
        )));
    }
    if samples.len() < 3 {
        return Err(Error::InsufficientSamples {
            required: 3,
            got: samples.len(),
        });
    }
    for (uv, target) in samples {
        check_param(uv[0])?;
        check_param(uv[1])?;
        if !target.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("fit targets"));
        }
    }
    let unknowns = rows * cols;
    let ku = DirectionBasis::new(&KnotVector::for_direction(rows, closed_u)?);
    let kv = DirectionBasis::new(&KnotVector::for_direction(cols, closed_v)?);
    let mut coo = CooMatrix::new(unknowns, unknowns);
    let mut rhs = DMatrix::<f64>::zeros(unknowns, 3);
    let mut trace = 0.0;
    for (uv, target) in samples {
        let row = design_row(&ku, &kv, cols, *uv);
        for &(i, wi) in &row {
            trace += wi * wi;
            for c in 0..3 {
                rhs[(i, c)] += wi * target[c];
            }
            for &(j, wj) in &row {
                coo.push(i, j, wi * wj);
            }
        }
    }
    let lambda = smoothing * trace / unknowns as f64;
    let wrap = |i: isize, n: usize, closed: bool| -> Option<usize> {
        if (0..n as isize).contains(&i) {
            Some(i as usize)
        } else if closed {
            Some(i.rem_euclid(n as isize) as usize)
        } else {
            None
        }
    };
    let mut stencils: Vec<Vec<(usize, f64)>> = Vec::new();
    for p in 0..rows as isize {
        for q in 0..cols as isize {
            let at = |dp: isize, dq: isize| Some(wrap(p + dp, rows, closed_u)? * cols + wrap(q + dq, cols, closed_v)?);
            let candidates = [
                [(at(-1, 0), 1.0), (at(0, 0), -2.0), (at(1, 0), 1.0), (None, 0.0)],
                [(at(0, -1), 1.0), (at(0, 0), -2.0), (at(0, 1), 1.0), (None, 0.0)],
                [(at(0, 0), 1.0), (at(1, 0), -1.0), (at(0, 1), -1.0), (at(1, 1), 1.0)],
            ];
            for (k, stencil) in candidates.iter().enumerate() {
                let used = if k == 2 { 4 } else { 3 };
                if stencil[..used].iter().all(|(i, _)| i.is_some()) {
                    stencils.push(stencil[..used].iter().map(|(i, w)| (i.expect("checked"), *w)).collect());
                }
            }
        }
    }
    for st in &stencils {
        for &(i, wi) in st {
            for &(j, wj) in st {
                coo.push(i, j, lambda * wi * wj);
            }
        }
    }
    let normal = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&normal)
        .map_err(|_| Error::Degenerate("smoothed normal equations are not positive definite".into()))?;
    let solution = chol.solve(&rhs);
    if !solution.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("smoothed control grid"));
    }
    let points = (0..unknowns)
        .map(|i| Point3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]))
        .collect();
    ControlGrid::new(rows, cols, points, closed_u, closed_v)
}

/// True when a direction with several knot spans sees samples in only one.
fn single_span(params: impl Iterator<Item = f64>, dir: &DirectionBasis) -> bool {
    let spans = if dir.periodic { dir.count } else { dir.count - DEGREE };
    if spans < 2 {
        return false;
    }
    let mut first = None;
    for u in params {
        let s = dir.span(if dir.periodic && u >= 1.0 { 0.0 } else { u });
        match first {
            None => first = Some(s),
            Some(f) if f != s => return false,
            _ => {}
        }
    }
    true
}

fn well_conditioned(chol: &CscCholesky<f64>, max_diag: f64) -> bool {
    let l = chol.l();
    let mut min_pivot = f64::INFINITY;
    for j in 0..l.ncols() {
        let col = l.col(j);
        let pivot = col
            .row_indices()
            .iter()
            .zip(col.values())
            .find(|(&r, _)| r == j)
            .map_or(0.0, |(_, &v)| v * v);
        min_pivot = min_pivot.min(pivot);
    }
    min_pivot.is_finite() && min_pivot > 1e-12 * max_diag
}

// Dense fallback budget, in design-matrix entries (about 200 MB).
const MAX_DENSE_ENTRIES: usize = 25_000_000;

fn solve_by_pivoted_qr(
    design: &[Vec<(usize, f64)>],
    samples: &[([f64; 2], Point3)],
    unknowns: usize,
) -> Result<DMatrix<f64>> {
    if design.len() * unknowns > MAX_DENSE_ENTRIES {
        return Err(Error::Degenerate(format!(
            "normal equations for {unknowns} unknowns are ill-conditioned and too large for a dense rank check"
        )));
    }
    let mut a = DMatrix::<f64>::zeros(design.len(), unknowns);
    let mut b = DMatrix::<f64>::zeros(design.len(), 3);
    for (r, (row, (_, target))) in design.iter().zip(samples).enumerate() {
        for &(i, w) in row {
            a[(r, i)] = w;
        }
        for c in 0..3 {
            b[(r, c)] = target[c];
        }
    }
    let qr = a.col_piv_qr();
    let rmat = qr.r();
    let scale = rmat[(0, 0)].abs();
    let rank = (0..unknowns)
        .take_while(|&k| rmat[(k, k)].abs() > 1e-10 * scale)
        .count();
    if rank < unknowns {
        return Err(Error::RankDeficient { rank, unknowns });
    }
    let mut qtb = b;
    qr.q_tr_mul(&mut qtb);
    let top = qtb.rows(0, unknowns).into_owned();
    let y = rmat
        .solve_upper_triangular(&top)
        .ok_or(Error::RankDeficient { rank, unknowns })?;
    let mut x = y;
    qr.p().inv_permute_rows(&mut x);
    Ok(x)
}

/// Least-squares patch through `samples` on the standard 20x20 grid.
pub fn standardize_patch(dense_samples: &[([f64; 2], Point3)], closed_u: bool, closed_v: bool) -> Result<BSplinePatch> {
    let grid = fit_control_grid(dense_samples, STANDARD_GRID, STANDARD_GRID, closed_u, closed_v)?;
    BSplinePatch::new(grid)
}

/// Re-expresses `source` on the standard 20x20 grid from a 60x60 lattice of
/// its samples.
pub fn standardize(source: &BSplinePatch) -> Result<BSplinePatch> {
    let side = (STANDARD_SAMPLES as f64).sqrt() as usize;
    let samples: Vec<_> = source
        .sample_uniform(side, side)?
        .into_iter()
        .map(|s| (s.uv, s.position))
        .collect();
    standardize_patch(&samples, source.closed_u(), source.closed_v())
}

fn rotated_box_area(points: &[[f64; 2]], theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for q in points {
        let r = [c * q[0] + s * q[1], c * q[1] - s * q[0]];
        for k in 0..2 {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    (hi[0] - lo[0]) * (hi[1] - lo[1])
}

/// Rotation in `[-π/4, π/4]` minimizing the axis-aligned box area: a 1°
/// scan refined by golden-section search. Zero stays preferred on ties.
fn min_area_rotation(points: &[[f64; 2]]) -> f64 {
    let step = 1f64.to_radians();
    let mut best = (rotated_box_area(points, 0.0), 0.0);
    for k in -45..=45 {
        let t = k as f64 * step;
        let a = rotated_box_area(points, t);
        if a < best.0 * (1.0 - 1e-9) {
            best = (a, t);
        }
    }
    if best.1 == 0.0 {
        return 0.0;
    }
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..30 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if rotated_box_area(points, x1) < rotated_box_area(points, x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let t = 0.5 * (a + b);
    if rotated_box_area(points, t) < best.0 {
        t
    } else {
        best.1
    }
}

/// Initial `(u, v)` for unorganized points: min-max normalized coordinates
/// in the plane of the two leading principal directions, with the in-plane
/// axes rotated to the minimum-area bounding rectangle so that square-ish
/// patches do not leave empty corners in the parameter domain.
pub fn init_parametrization(points: &[Point3]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points to parametrize, got {}",
            points.len()
        )));
    }
    let pa = principal_axes(points);
    if !(pa.variances[0] > 0.0) || pa.variances[1] <= 1e-12 * pa.variances[0] {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }
    let flat: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let d = p - pa.centroid;
            [d.dot(&pa.axes[0]), d.dot(&pa.axes[1])]
        })
        .collect();
    let theta = min_area_rotation(&flat);
    let (s, c) = theta.sin_cos();
    let proj: Vec<[f64; 2]> = flat
        .iter()
        .map(|q| [c * q[0] + s * q[1], c * q[1] - s * q[0]])
        .collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for uv in &proj {
        for k in 0..2 {
            lo[k] = lo[k].min(uv[k]);
            hi[k] = hi[k].max(uv[k]);
        }
    }
    Ok(proj
        .into_iter()
        .map(|uv| {
            [
                ((uv[0] - lo[0]) / (hi[0] - lo[0])).clamp(0.0, 1.0),
                ((uv[1] - lo[1]) / (hi[1] - lo[1])).clamp(0.0, 1.0),
            ]
        })
        .collect())
}
