//! Evaluation metrics: segment matching, segmentation and type mIOU,
//! residual error, point coverage and Chamfer distance.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::geom::{nearest_sq_distances, Point3};
use crate::primitives::{trimmed_samples, DistanceEvaluator, PrimitiveKind, PrimitivePatch};

/// Coverage threshold for [`p_coverage`].
pub const COVERAGE_EPSILON: f64 = 0.01;
/// Trimming threshold applied to reconstructed samples before Chamfer.
pub const TRIM_EPSILON: f64 = 0.1;
/// Points sampled per shape for Chamfer distance.
pub const CHAMFER_SAMPLES: usize = 10_000;
/// Dense samples per B-spline patch used for distance queries.
pub const SPLINE_EVAL_SAMPLES: usize = 2000;

/// Hard point-to-segment assignment plus a primitive kind per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabeling {
    labels: Vec<usize>,
    types: Vec<PrimitiveKind>,
}

impl SegmentLabeling {
    /// `labels[i]` is the segment of point `i`; `types[k]` the kind of segment `k`.
    pub fn new(labels: Vec<usize>, types: Vec<PrimitiveKind>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::Empty("segment types"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= types.len()) {
            return Err(Error::InvalidArgument(format!(
                "segment label {bad} out of range for {} segments",
                types.len()
            )));
        }
        Ok(Self { labels, types })
    }

    /// Builds a labeling from disjoint index sets that together cover `0..n`.
    pub fn from_segments(n: usize, segments: &[Vec<usize>], types: Vec<PrimitiveKind>) -> Result<Self> {
        if segments.len() != types.len() {
            return Err(Error::DimensionMismatch {
                expected: segments.len(),
                got: types.len(),
            });
        }
        let mut labels = vec![usize::MAX; n];
        for (k, seg) in segments.iter().enumerate() {
            for &i in seg {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "point index {i} out of range for {n} points"
                    )));
                }
                if labels[i] != usize::MAX {
                    return Err(Error::InvalidArgument(format!("point {i} belongs to two segments")));
                }
                labels[i] = k;
            }
        }
        if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(Error::InvalidArgument(format!("point {i} belongs to no segment")));
        }
        Self::new(labels, types)
    }

    /// Reads the hard assignment off an N×K one-hot matrix.
    pub fn from_membership(membership: &DMatrix<f64>, types: Vec<PrimitiveKind>) -> Result<Self> {
        if membership.ncols() != types.len() {
            return Err(Error::DimensionMismatch {
                expected: types.len(),
                got: membership.ncols(),
            });
        }
        let mut labels = Vec::with_capacity(membership.nrows());
        for (i, row) in membership.row_iter().enumerate() {
            let ones: Vec<usize> = (0..row.len()).filter(|&k| row[k] == 1.0).collect();
            if ones.len() != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidArgument(format!("membership row {i} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Self::new(labels, types)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.types.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn types(&self) -> &[PrimitiveKind] {
        &self.types
    }

    pub fn membership(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.labels.len(), self.types.len());
        for (i, &k) in self.labels.iter().enumerate() {
            w[(i, k)] = 1.0;
        }
        w
    }

    /// Point indices of every segment.
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.types.len()];
        for (i, &k) in self.labels.iter().enumerate() {
            out[k].push(i);
        }
        out
    }
}

/// IOU of every (predicted, ground-truth) segment pair.
pub fn iou_table(predicted: &SegmentLabeling, truth: &SegmentLabeling) -> Result<DMatrix<f64>> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let (kp, kt) = (predicted.num_segments(), truth.num_segments());
    let mut inter = DMatrix::<f64>::zeros(kp, kt);
    let mut size_p = vec![0.0; kp];
    let mut size_t = vec![0.0; kt];
    for (&a, &b) in predicted.labels.iter().zip(&truth.labels) {
        inter[(a, b)] += 1.0;
        size_p[a] += 1.0;
        size_t[b] += 1.0;
    }
    Ok(DMatrix::from_fn(kp, kt, |a, b| {
        let union = size_p[a] + size_t[b] - inter[(a, b)];
        if union > 0.0 {
            inter[(a, b)] / union
        } else {
            0.0
        }
    }))
}

/// One-to-one matching of predicted to ground-truth segments maximizing the
/// summed IOU. Returns `(predicted k, ground-truth k̂)` pairs sorted by `k`.
pub fn match_segments(predicted: &SegmentLabeling, truth: &SegmentLabeling) -> Result<Vec<(usize, usize)>> {
    let iou = iou_table(predicted, truth)?;
    let costs = CostMatrix::from_fn(iou.nrows(), iou.ncols(), |a, b| 1.0 - iou[(a, b)])?;
    Ok(solve_assignment(&costs)?.pairs)
}

/// Mean over ground-truth segments of the IOU with the matched predicted
/// segment; unmatched ground-truth segments count as 0.
pub fn seg_miou(predicted: &SegmentLabeling, truth: &SegmentLabeling) -> Result<f64> {
    let iou = iou_table(predicted, truth)?;
    let pairs = match_segments(predicted, truth)?;
    Ok(seg_miou_for(&iou, &pairs, truth.num_segments()))
}

fn seg_miou_for(iou: &DMatrix<f64>, pairs: &[(usize, usize)], k_truth: usize) -> f64 {
    pairs.iter().map(|&(a, b)| iou[(a, b)]).sum::<f64>() / k_truth as f64
}

/// Fraction of ground-truth segments whose matched prediction has the same kind.
pub fn label_miou(predicted: &SegmentLabeling, truth: &SegmentLabeling) -> Result<f64> {
    let pairs = match_segments(predicted, truth)?;
    Ok(label_miou_for(predicted, truth, &pairs))
}

fn label_miou_for(predicted: &SegmentLabeling, truth: &SegmentLabeling, pairs: &[(usize, usize)]) -> f64 {
    let hits = pairs
        .iter()
        .filter(|&&(a, b)| predicted.types[a] == truth.types[b])
        .count();
    hits as f64 / truth.num_segments() as f64
}

/// Mean over segments of the mean unsquared distance from the segment's
/// ground-truth samples to its predicted patch; `patches[k]` pairs with
/// `samples[k]`.
pub fn residual_error(patches: &[PrimitivePatch], samples: &[Vec<Point3>]) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    if patches.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: patches.len(),
            got: samples.len(),
        });
    }
    let mut total = 0.0;
    for (patch, pts) in patches.iter().zip(samples) {
        if pts.is_empty() {
            return Err(Error::Empty("ground-truth sample set"));
        }
        let eval = DistanceEvaluator::with_samples(patch, SPLINE_EVAL_SAMPLES);
        total += eval.distances(pts).iter().sum::<f64>() / pts.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// Fraction of `points` within `epsilon` of the nearest patch.
pub fn p_coverage(points: &[Point3], patches: &[PrimitivePatch], epsilon: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("input points"));
    }
    if patches.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let evals: Vec<_> = patches
        .iter()
        .map(|p| DistanceEvaluator::with_samples(p, SPLINE_EVAL_SAMPLES))
        .collect();
    let mut best = vec![f64::INFINITY; points.len()];
    for e in &evals {
        for (b, d) in best.iter_mut().zip(e.distances(points)) {
            *b = b.min(d);
        }
    }
    Ok(best.iter().filter(|&&d| d <= epsilon).count() as f64 / points.len() as f64)
}

/// One-sided and symmetric Chamfer terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    /// Mean over reconstructed points of the squared distance to the input.
    pub p_cover: f64,
    /// Mean over input points of the squared distance to the reconstruction.
    pub s_cover: f64,
    pub chamfer: f64,
}

pub fn chamfer_distance(reconstructed: &[Point3], input: &[Point3]) -> Result<Chamfer> {
    if reconstructed.is_empty() {
        return Err(Error::Empty("reconstructed points"));
    }
    if input.is_empty() {
        return Err(Error::Empty("input points"));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let p_cover = mean(nearest_sq_distances(reconstructed, input));
    let s_cover = mean(nearest_sq_distances(input, reconstructed));
    Ok(Chamfer {
        p_cover,
        s_cover,
        chamfer: 0.5 * (p_cover + s_cover),
    })
}

/// Samples every patch over the region its segment supports and trims
/// samples farther than `epsilon` from the segment. `total` samples are split
/// evenly across patches before trimming.
pub fn reconstruct_samples<R: Rng>(
    patches: &[PrimitivePatch],
    segments: &[Vec<Point3>],
    total: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Point3>> {
    if patches.len() != segments.len() {
        return Err(Error::DimensionMismatch {
            expected: patches.len(),
            got: segments.len(),
        });
    }
    if patches.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    let per = total.div_ceil(patches.len());
    let mut out = Vec::with_capacity(total);
    for (patch, seg) in patches.iter().zip(segments) {
        if seg.is_empty() {
            continue;
        }
        out.extend(trimmed_samples(patch, seg, per, epsilon, rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seg_miou: f64,
    pub label_miou: f64,
    pub residual: f64,
    pub p_coverage: f64,
    pub p_cover: f64,
    pub s_cover: f64,
    pub chamfer: f64,
    pub matched_pairs: Vec<(usize, usize)>,
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub coverage_epsilon: f64,
    pub trim_epsilon: f64,
    pub chamfer_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coverage_epsilon: COVERAGE_EPSILON,
            trim_epsilon: TRIM_EPSILON,
            chamfer_samples: CHAMFER_SAMPLES,
        }
    }
}

/// Full metric suite for one shape.
///
/// `patches[k]` is the patch fitted to predicted segment `k`. The residual
/// compares every matched ground-truth segment's input points to the matched
/// patch. Chamfer uses trimmed samples of all predicted patches against up to
/// `chamfer_samples` input points drawn with `rng`.
pub fn evaluate<R: Rng>(
    points: &[Point3],
    predicted: &SegmentLabeling,
    patches: &[PrimitivePatch],
    truth: &SegmentLabeling,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<MetricsReport> {
    if points.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: points.len(),
        });
    }
    if patches.len() != predicted.num_segments() {
        return Err(Error::DimensionMismatch {
            expected: predicted.num_segments(),
            got: patches.len(),
        });
    }
    let iou = iou_table(predicted, truth)?;
    let pairs = match_segments(predicted, truth)?;
    let seg = seg_miou_for(&iou, &pairs, truth.num_segments());
    let label = label_miou_for(predicted, truth, &pairs);

    let gather = |idx: &[usize]| idx.iter().map(|&i| points[i]).collect::<Vec<_>>();
    let truth_segments = truth.segments();
    let pred_segments = predicted.segments();
    let matched: Vec<(PrimitivePatch, Vec<Point3>)> = pairs
        .iter()
        .filter(|&&(_, b)| !truth_segments[b].is_empty())
        .map(|&(a, b)| (patches[a].clone(), gather(&truth_segments[b])))
        .collect();
    let residual = if matched.is_empty() {
        0.0
    } else {
        let (ps, ss): (Vec<_>, Vec<_>) = matched.into_iter().unzip();
        residual_error(&ps, &ss)?
    };
    let coverage = p_coverage(points, patches, config.coverage_epsilon)?;

    let pred_points: Vec<Vec<Point3>> = pred_segments.iter().map(|s| gather(s)).collect();
    let recon = reconstruct_samples(patches, &pred_points, config.chamfer_samples, config.trim_epsilon, rng)?;
    let input: Vec<Point3> = if points.len() > config.chamfer_samples {
        rand::seq::index::sample(rng, points.len(), config.chamfer_samples)
            .into_iter()
            .map(|i| points[i])
            .collect()
    } else {
        points.to_vec()
    };
    let cd = chamfer_distance(&recon, &input)?;
    Ok(MetricsReport {
        seg_miou: seg,
        label_miou: label,
        residual,
        p_coverage: coverage,
        p_cover: cd.p_cover,
        s_cover: cd.s_cover,
        chamfer: cd.chamfer,
        matched_pairs: pairs,
    })
}
