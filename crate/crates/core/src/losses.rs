//! Value functions for the training losses: embedding triplets, type
//! classification, permutation-invariant control-point regression, grid
//! Laplacian agreement and point-to-patch distance.

use crate::assignment::{solve_assignment, CostMatrix};
use crate::bspline::BSplinePatch;
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::primitives::{DistanceEvaluator, PrimitiveKind, PrimitivePatch};

pub const DEFAULT_MARGIN: f64 = 0.9;
/// Side of the UV sample grids compared by the Laplacian loss.
pub const LAPLACIAN_GRID: usize = 40;
const UNIT_TOLERANCE: f64 = 1e-6;
const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "embedding must be unit length, has norm {n}"
        )));
    }
    Ok(())
}

/// `max(‖a − b‖ − ‖a − c‖ + τ, 0)` for anchor `a`, positive `b`, negative `c`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], config: &TripletConfig) -> Result<f64> {
    if positive.len() != anchor.len() || negative.len() != anchor.len() {
        return Err(Error::DimensionMismatch {
            expected: anchor.len(),
            got: positive.len().max(negative.len()),
        });
    }
    if !(config.margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be nonnegative, got {}",
            config.margin
        )));
    }
    for v in [anchor, positive, negative] {
        check_unit(v)?;
    }
    Ok((distance(anchor, positive) - distance(anchor, negative) + config.margin).max(0.0))
}

/// Anchor, positive and negative embedding of one triplet.
pub type Triplet<'a> = (&'a [f64], &'a [f64], &'a [f64]);

/// Sum over shapes of the mean triplet loss of each shape's triplet set.
pub fn embedding_loss(shapes: &[Vec<Triplet<'_>>], config: &TripletConfig) -> Result<f64> {
    let mut total = 0.0;
    for triplets in shapes {
        if triplets.is_empty() {
            return Err(Error::Empty("triplet set"));
        }
        let mut sum = 0.0;
        for (a, b, c) in triplets {
            sum += triplet_loss(a, b, c, config)?;
        }
        total += sum / triplets.len() as f64;
    }
    Ok(total)
}

/// Mean negative log-probability of each point's true type.
///
/// `probabilities` holds one row of six type probabilities per point, in
/// [`PrimitiveKind::ALL`] order; values are floored at 1e-12 before the log.
pub fn classification_loss(probabilities: &[[f64; 6]], true_types: &[PrimitiveKind]) -> Result<f64> {
    if probabilities.len() != true_types.len() {
        return Err(Error::DimensionMismatch {
            expected: probabilities.len(),
            got: true_types.len(),
        });
    }
    if probabilities.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    let mut sum = 0.0;
    for (row, t) in probabilities.iter().zip(true_types) {
        sum -= row[t.index()].max(PROBABILITY_FLOOR).ln();
    }
    Ok(sum / probabilities.len() as f64)
}

/// Grid index permutations under which the control-point loss is invariant.
///
/// Each entry maps destination index `k` to the source index it reads, so
/// `π(C)[k] = C[perm[k]]` on a row-major n×n grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSet {
    side: usize,
    perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    /// Flips of u and v, optionally combined with a transpose; for closed
    /// grids also every cyclic shift along u. Open: 8 maps, closed: 8n.
    pub fn new(side: usize, closed: bool) -> Self {
        let shifts = if closed { side } else { 1 };
        let mut perms = Vec::with_capacity(8 * shifts);
        for shift in 0..shifts {
            for flip_u in [false, true] {
                for flip_v in [false, true] {
                    for transpose in [false, true] {
                        perms.push(
                            (0..side * side)
                                .map(|k| {
                                    let (p, q) = (k / side, k % side);
                                    let (p, q) = if transpose { (q, p) } else { (p, q) };
                                    let p = if flip_u { side - 1 - p } else { p };
                                    let q = if flip_v { side - 1 - q } else { q };
                                    ((p + shift) % side) * side + q
                                })
                                .collect(),
                        );
                    }
                }
            }
        }
        Self { side, perms }
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.perms.iter().map(Vec::as_slice)
    }

    pub fn apply(&self, which: usize, grid: &[Point3]) -> Vec<Point3> {
        self.perms[which].iter().map(|&s| grid[s]).collect()
    }
}

/// `(1/|C|) min_π ‖C − π(Ĉ)‖²` over the permutation set for the grid's
/// open/closed flag. Grids are row-major and square.
pub fn control_point_loss(predicted: &[Point3], ground_truth: &[Point3], closed: bool) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            expected: ground_truth.len(),
            got: predicted.len(),
        });
    }
    let side = (predicted.len() as f64).sqrt().round() as usize;
    if side * side != predicted.len() || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "control grids must be square, got {} points",
            predicted.len()
        )));
    }
    let set = PermutationSet::new(side, closed);
    let best = set
        .iter()
        .map(|perm| {
            predicted
                .iter()
                .zip(perm)
                .map(|(c, &s)| (c - ground_truth[s]).norm_squared())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / predicted.len() as f64)
}

/// Five-point Laplacians of a row-major grid; `None` on boundary samples.
pub fn grid_laplacians(points: &[Point3], rows: usize, cols: usize) -> Vec<Option<Point3>> {
    (0..rows * cols)
        .map(|k| {
            let (i, j) = (k / cols, k % cols);
            if i == 0 || j == 0 || i + 1 == rows || j + 1 == cols {
                return None;
            }
            Some(points[k - cols] + points[k + cols] + points[k - 1] + points[k + 1] - points[k] * 4.0)
        })
        .collect()
}

/// Laplacian loss value and the sample correspondence it used.
#[derive(Debug, Clone)]
pub struct LaplacianLoss {
    pub value: f64,
    /// `(predicted sample, ground-truth sample)` pairs from the matching.
    pub pairs: Vec<(usize, usize)>,
}

/// Compares grid Laplacians of `predicted` and of ground-truth samples.
///
/// The predicted patch is sampled on the same `rows`×`cols` UV grid as
/// `gt_samples`; samples are matched one-to-one by squared distance, and the
/// loss is the mean of `‖L(r) − L(r̂)‖²` over matched pairs where both
/// samples are interior.
pub fn laplacian_loss_detail(
    predicted: &BSplinePatch,
    gt_samples: &[Point3],
    rows: usize,
    cols: usize,
) -> Result<LaplacianLoss> {
    if rows < 3 || cols < 3 {
        return Err(Error::GridTooSmall { rows, cols });
    }
    if gt_samples.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: gt_samples.len(),
        });
    }
    let samples = predicted.sample_positions(rows, cols)?;
    let lp = grid_laplacians(&samples, rows, cols);
    let lg = grid_laplacians(gt_samples, rows, cols);
    let costs = CostMatrix::from_fn(samples.len(), gt_samples.len(), |r, c| {
        (samples[r] - gt_samples[c]).norm_squared()
    })?;
    let pairs = solve_assignment(&costs)?.pairs;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(n, m) in &pairs {
        if let (Some(a), Some(b)) = (lp[n], lg[m]) {
            sum += (a - b).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no matched pair of interior samples".into()));
    }
    Ok(LaplacianLoss {
        value: sum / count as f64,
        pairs,
    })
}

/// [`laplacian_loss_detail`] on the default 40×40 grids.
pub fn laplacian_loss(predicted: &BSplinePatch, gt_samples: &[Point3]) -> Result<f64> {
    Ok(laplacian_loss_detail(predicted, gt_samples, LAPLACIAN_GRID, LAPLACIAN_GRID)?.value)
}

/// Mean over patches of the mean squared distance from each patch's
/// ground-truth samples to the predicted patch.
pub fn patch_distance_loss(predicted: &[PrimitivePatch], gt_samples: &[Vec<Point3>]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    if predicted.len() != gt_samples.len() {
        return Err(Error::DimensionMismatch {
            expected: predicted.len(),
            got: gt_samples.len(),
        });
    }
    let mut total = 0.0;
    for (patch, samples) in predicted.iter().zip(gt_samples) {
        if samples.is_empty() {
            return Err(Error::Empty("ground-truth sample set"));
        }
        let eval = DistanceEvaluator::new(patch);
        let sum: f64 = eval.distances(samples).iter().map(|d| d * d).sum();
        total += sum / samples.len() as f64;
    }
    Ok(total / predicted.len() as f64)
}
