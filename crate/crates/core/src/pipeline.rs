//! End-to-end decomposition: embed, cluster, classify, fit, refine.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{fit_control_grid_smooth, init_parametrization, BSplinePatch, DEGREE};
use crate::clustering::{cluster_sampled, MeanShiftConfig};
use crate::embedding::{geometric_embedding, load_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::geom::{bbox_diagonal, bounding_box, Point3, PointCloud};
use crate::postprocess::{refine_to_tolerance, FitToleranceConfig};
use crate::primitives::{fit_primitive, DistanceEvaluator, PrimitiveKind, PrimitivePatch};

/// Where per-point embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    Geometric { scale_position: f64, scale_normal: f64 },
    File { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Geometric {
            scale_position: 1.0,
            scale_normal: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub embedding: EmbeddingSource,
    pub neighbor_rank: usize,
    pub mean_shift_iterations: usize,
    pub mean_shift_tolerance: f64,
    /// Rows drawn for mean-shift on larger clouds; all points are labeled
    /// against the centers found on the sample.
    pub mean_shift_samples: usize,
    /// Control grid of the initial B-spline fit, rows × columns.
    pub spline_grid: [usize; 2],
    /// Relative weight of the smoothness penalty in segment spline fits.
    pub spline_smoothing: f64,
    pub refine: bool,
    pub refine_tolerance: f64,
    pub refine_min_grid: usize,
    pub refine_max_grid: usize,
    /// Clusters smaller than this merge into the nearest larger cluster.
    pub min_segment_size: usize,
    /// λ in the model-selection score `residual + λ · parameter count`.
    pub complexity_penalty: f64,
    /// Seam gap below which an open spline is refitted closed, relative to
    /// the patch's bounding-box diagonal.
    pub seam_gap: f64,
    /// Segments larger than this are subsampled for model selection.
    pub max_fit_points: usize,
    pub chamfer_samples: usize,
    pub spline_eval_samples: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingSource::default(),
            neighbor_rank: crate::clustering::DEFAULT_NEIGHBOR_RANK,
            mean_shift_iterations: crate::clustering::DEFAULT_MAX_ITERATIONS,
            mean_shift_tolerance: crate::clustering::DEFAULT_TOLERANCE,
            mean_shift_samples: 2000,
            spline_grid: [crate::bspline::STANDARD_GRID; 2],
            spline_smoothing: 1e-3,
            refine: true,
            refine_tolerance: 5e-4,
            refine_min_grid: 4,
            refine_max_grid: 80,
            min_segment_size: 20,
            complexity_penalty: 1e-5,
            seam_gap: 0.02,
            max_fit_points: 5000,
            chamfer_samples: crate::metrics::CHAMFER_SAMPLES,
            spline_eval_samples: crate::metrics::SPLINE_EVAL_SAMPLES,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("neighbor_rank", self.neighbor_rank),
            ("mean_shift_iterations", self.mean_shift_iterations),
            ("mean_shift_samples", self.mean_shift_samples),
            ("spline_grid rows", self.spline_grid[0]),
            ("spline_grid cols", self.spline_grid[1]),
            ("min_segment_size", self.min_segment_size),
            ("max_fit_points", self.max_fit_points),
            ("chamfer_samples", self.chamfer_samples),
            ("spline_eval_samples", self.spline_eval_samples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.spline_grid.iter().any(|&g| g < DEGREE + 1) {
            return Err(Error::GridTooSmall {
                rows: self.spline_grid[0],
                cols: self.spline_grid[1],
            });
        }
        for (name, v) in [
            ("mean_shift_tolerance", self.mean_shift_tolerance),
            ("refine_tolerance", self.refine_tolerance),
            ("seam_gap", self.seam_gap),
            ("spline_smoothing", self.spline_smoothing),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.complexity_penalty >= 0.0) {
            return Err(Error::InvalidArgument("complexity_penalty must be nonnegative".into()));
        }
        if let EmbeddingSource::Geometric {
            scale_position,
            scale_normal,
        } = self.embedding
        {
            if !(scale_position >= 0.0 && scale_normal >= 0.0 && scale_position + scale_normal > 0.0) {
                return Err(Error::InvalidArgument(
                    "embedding scales must be nonnegative, not both zero".into(),
                ));
            }
        }
        self.tolerance_config().validate()
    }

    fn tolerance_config(&self) -> FitToleranceConfig {
        FitToleranceConfig {
            tolerance: self.refine_tolerance,
            min_grid: self.refine_min_grid,
            max_grid: self.refine_max_grid,
        }
    }
}

/// Model-selection settings used by [`classify_segment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyOptions {
    pub complexity_penalty: f64,
    pub seam_gap: f64,
    pub spline_grid: [usize; 2],
    pub spline_smoothing: f64,
    /// Length unit for residuals; `None` uses the segment's longest extent.
    pub scale: Option<f64>,
    pub spline_eval_samples: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        let c = PipelineConfig::default();
        Self {
            complexity_penalty: c.complexity_penalty,
            seam_gap: c.seam_gap,
            spline_grid: c.spline_grid,
            spline_smoothing: c.spline_smoothing,
            scale: None,
            spline_eval_samples: c.spline_eval_samples,
        }
    }
}

/// A fitted candidate for one segment.
#[derive(Debug, Clone)]
pub struct SegmentFit {
    pub patch: PrimitivePatch,
    /// Mean unsquared point-to-patch distance.
    pub residual: f64,
    /// `residual / scale + λ · parameter count`.
    pub score: f64,
}

/// Longest side of the bounding box, or 1 for a single point.
pub fn extent(points: &[Point3]) -> f64 {
    let (lo, hi) = bounding_box(points);
    let e = (hi - lo).max();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

fn mean_distance(patch: &PrimitivePatch, points: &[Point3], samples: usize) -> f64 {
    let d = DistanceEvaluator::with_samples(patch, samples).distances(points);
    d.iter().sum::<f64>() / d.len() as f64
}

/// Smoothed open spline fit on the initial parametrization, refitted closed in u when
/// the u seam nearly closes.
pub fn fit_spline_segment(points: &[Point3], grid: [usize; 2], seam_gap: f64, smoothing: f64) -> Result<BSplinePatch> {
    let uv = init_parametrization(points)?;
    let samples: Vec<([f64; 2], Point3)> = uv.into_iter().zip(points.iter().copied()).collect();
    let fit = |closed_u| {
        fit_control_grid_smooth(&samples, grid[0], grid[1], closed_u, false, smoothing).and_then(BSplinePatch::new)
    };
    let open = fit(false)?;
    let vs = BSplinePatch::uniform_params(grid[1].max(2), false);
    let gap = vs
        .iter()
        .map(|&v| (open.eval_unchecked(0.0, v) - open.eval_unchecked(1.0, v)).norm())
        .sum::<f64>()
        / vs.len() as f64;
    let diag = bbox_diagonal(&open.sample_positions(20, 20)?);
    if gap < seam_gap * diag {
        if let Ok(closed) = fit(true) {
            return Ok(closed);
        }
    }
    Ok(open)
}

fn score(patch: PrimitivePatch, points: &[Point3], scale: f64, options: &ClassifyOptions) -> SegmentFit {
    let residual = mean_distance(&patch, points, options.spline_eval_samples);
    let score = residual / scale + options.complexity_penalty * patch.degrees_of_freedom() as f64;
    SegmentFit { patch, residual, score }
}

/// Fits every basic kind and a B-spline patch, best score first. Kinds that
/// cannot be fitted are skipped.
pub fn candidate_fits(points: &[Point3], normals: Option<&[Point3]>, options: &ClassifyOptions) -> Vec<SegmentFit> {
    let scale = options.scale.unwrap_or_else(|| extent(points));
    let mut fits: Vec<SegmentFit> = PrimitiveKind::BASIC
        .iter()
        .filter_map(|&k| fit_primitive(k, points, normals).ok())
        .map(|p| score(p, points, scale, options))
        .collect();
    let grid = spline_grid_for(points.len(), options.spline_grid);
    if let Some(g) = grid {
        if let Ok(b) = fit_spline_segment(points, g, options.seam_gap, options.spline_smoothing) {
            fits.push(score(PrimitivePatch::BSpline(b), points, scale, options));
        }
    }
    fits.retain(|f| f.score.is_finite());
    fits.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.patch.kind().cmp(&b.patch.kind())));
    fits
}

/// The configured grid, shrunk so that each control point has at least two
/// samples; `None` below a 4×4 grid.
fn spline_grid_for(n: usize, grid: [usize; 2]) -> Option<[usize; 2]> {
    let mut g = grid;
    while g[0] * g[1] * 2 > n {
        if g[0] <= 4 && g[1] <= 4 {
            return None;
        }
        g = [(g[0] - 1).max(4), (g[1] - 1).max(4)];
    }
    Some(g)
}

/// Most frequent label; ties go to the earlier kind in the fixed kind order.
pub fn majority_kind(labels: &[PrimitiveKind]) -> Option<PrimitiveKind> {
    let mut counts = [0usize; 6];
    for l in labels {
        counts[l.index()] += 1;
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then(|| PrimitiveKind::ALL[best])
}

/// Kind of a segment: majority vote over `provided_labels` when given,
/// otherwise the best-scoring fitted candidate.
pub fn classify_segment(
    points: &[Point3],
    normals: Option<&[Point3]>,
    provided_labels: Option<&[PrimitiveKind]>,
    options: &ClassifyOptions,
) -> Result<PrimitiveKind> {
    if points.is_empty() {
        return Err(Error::Empty("segment"));
    }
    if let Some(labels) = provided_labels {
        if labels.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: labels.len(),
            });
        }
        return majority_kind(labels).ok_or(Error::Empty("segment labels"));
    }
    candidate_fits(points, normals, options)
        .first()
        .map(|f| f.patch.kind())
        .ok_or_else(|| Error::Degenerate(format!("no surface kind fits a segment of {} points", points.len())))
}

/// One fitted patch and the input points it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPatch {
    pub patch: PrimitivePatch,
    pub point_indices: Vec<usize>,
}

impl FittedPatch {
    pub fn kind(&self) -> PrimitiveKind {
        self.patch.kind()
    }
}

/// Output of a decomposition, as written to and read from patch files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePatchSet {
    pub patches: Vec<FittedPatch>,
    /// Configuration snapshot (provenance).
    pub config: Option<serde_json::Value>,
    pub metrics: Option<crate::metrics::MetricsReport>,
}

/// Per-segment diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub size: usize,
    pub kind: Option<PrimitiveKind>,
    pub residual_before: Option<f64>,
    pub residual_after: Option<f64>,
    /// Whether refinement met its tolerance.
    pub refine_success: Option<bool>,
    /// Whether the refined patch replaced the initial fit.
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub embedding: f64,
    pub clustering: f64,
    pub fitting: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub patch_set: SurfacePatchSet,
    /// Segment of every input point; segments are ordered by decreasing size.
    pub labels: Vec<usize>,
    pub segments: Vec<Vec<usize>>,
    /// Patch index of each segment, `None` where fitting failed.
    pub segment_patch: Vec<Option<usize>>,
    pub reports: Vec<SegmentReport>,
    pub clusters_before_merge: usize,
    pub timings: StageTimings,
    pub warnings: Vec<String>,
}

fn embeddings_for(cloud: &PointCloud, config: &PipelineConfig, warnings: &mut Vec<String>) -> Result<EmbeddingMatrix> {
    match &config.embedding {
        EmbeddingSource::Geometric {
            scale_position,
            scale_normal,
        } => {
            let sn = if cloud.normals.is_none() && *scale_normal > 0.0 {
                warnings.push("cloud has no normals; geometric embedding uses positions only".into());
                0.0
            } else {
                *scale_normal
            };
            let sp = if sn == 0.0 && *scale_position == 0.0 {
                1.0
            } else {
                *scale_position
            };
            geometric_embedding(cloud, sp, sn)
        }
        EmbeddingSource::File { path } => {
            let e = load_embeddings(path)?;
            if e.len() != cloud.len() {
                return Err(Error::DimensionMismatch {
                    expected: cloud.len(),
                    got: e.len(),
                });
            }
            Ok(e)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Merges clusters below `min_size` into the large cluster whose center is
/// nearest, then relabels by decreasing size (ties by smallest member index).
fn merge_small(labels: &[usize], centers: &[Vec<f64>], min_size: usize) -> Vec<Vec<usize>> {
    let k = centers.len();
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let large: Vec<usize> = (0..k).filter(|&c| sizes[c] >= min_size).collect();
    let target: Vec<usize> = (0..k)
        .map(|c| {
            if sizes[c] >= min_size || large.is_empty() {
                c
            } else {
                *large
                    .iter()
                    .max_by(|&&a, &&b| {
                        dot(&centers[c], &centers[a])
                            .total_cmp(&dot(&centers[c], &centers[b]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty")
            }
        })
        .collect();
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[target[l]].push(i);
    }
    let mut groups: Vec<Vec<usize>> = if large.is_empty() {
        vec![(0..labels.len()).collect()]
    } else {
        groups.into_iter().filter(|g| !g.is_empty()).collect()
    };
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
}

/// Seed for segment `k`, derived from the master seed.
pub fn segment_seed(master: u64, k: usize) -> u64 {
    let mut z = master ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SegmentOutcome {
    patch: Option<PrimitivePatch>,
    report: SegmentReport,
    warnings: Vec<String>,
}

fn fit_one(cloud: &PointCloud, indices: &[usize], k: usize, scale: f64, config: &PipelineConfig) -> SegmentOutcome {
    let mut warnings = Vec::new();
    let mut report = SegmentReport {
        size: indices.len(),
        kind: None,
        residual_before: None,
        residual_after: None,
        refine_success: None,
        refined: false,
    };
    let chosen: Vec<usize> = if indices.len() > config.max_fit_points {
        let mut rng = ChaCha8Rng::seed_from_u64(segment_seed(config.seed, k));
        let mut s: Vec<usize> = sample_indices(&mut rng, indices.len(), config.max_fit_points)
            .into_iter()
            .map(|j| indices[j])
            .collect();
        s.sort_unstable();
        s
    } else {
        indices.to_vec()
    };
    let points: Vec<Point3> = chosen.iter().map(|&i| cloud.positions[i]).collect();
    let normals: Option<Vec<Point3>> = cloud.normals.as_ref().map(|n| chosen.iter().map(|&i| n[i]).collect());
    let options = ClassifyOptions {
        complexity_penalty: config.complexity_penalty,
        seam_gap: config.seam_gap,
        spline_grid: config.spline_grid,
        spline_smoothing: config.spline_smoothing,
        scale: Some(scale),
        spline_eval_samples: config.spline_eval_samples,
    };
    let fits = candidate_fits(&points, normals.as_deref(), &options);
    let Some(best) = fits.into_iter().next() else {
        warnings.push(format!(
            "segment {k} ({} points): no surface kind could be fitted; segment left without a patch",
            indices.len()
        ));
        return SegmentOutcome {
            patch: None,
            report,
            warnings,
        };
    };
    let all_points: Vec<Point3> = indices.iter().map(|&i| cloud.positions[i]).collect();
    let before = if chosen.len() == indices.len() {
        best.residual
    } else {
        mean_distance(&best.patch, &all_points, config.spline_eval_samples)
    };
    report.kind = Some(best.patch.kind());
    report.residual_before = Some(before);
    report.residual_after = Some(before);
    let mut patch = best.patch;
    if let (true, PrimitivePatch::BSpline(b)) = (config.refine, &patch) {
        match refine_to_tolerance(b, &all_points, &config.tolerance_config()) {
            Ok(out) => {
                report.refine_success = Some(out.success);
                let candidate = PrimitivePatch::BSpline(out.patch);
                let after = mean_distance(&candidate, &all_points, config.spline_eval_samples);
                if out.success && after <= before {
                    report.residual_after = Some(after);
                    report.refined = true;
                    patch = candidate;
                }
            }
            Err(e) => warnings.push(format!("segment {k}: refinement failed ({e}); keeping the initial fit")),
        }
    }
    SegmentOutcome {
        patch: Some(patch),
        report,
        warnings,
    }
}

/// Decomposes `cloud` into segments and fits one surface patch per segment.
///
/// A segment that cannot be fitted is reported in `warnings` and gets no
/// patch; it still appears in `segments`, so every point belongs to exactly
/// one segment.
pub fn decompose(cloud: &PointCloud, config: &PipelineConfig) -> Result<Decomposition> {
    config.validate()?;
    if cloud.positions.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    let start = Instant::now();
    let mut warnings = Vec::new();
    let mut timings = StageTimings::default();
    let n = cloud.len();

    let (segments, clusters_before_merge) = if n < config.min_segment_size.max(2) {
        warnings.push(format!("cloud has only {n} points; treated as a single segment"));
        (vec![(0..n).collect::<Vec<_>>()], 1)
    } else {
        let t = Instant::now();
        let emb = embeddings_for(cloud, config, &mut warnings)?;
        timings.embedding = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let ms = MeanShiftConfig {
            neighbor_rank: config.neighbor_rank,
            max_iterations: config.mean_shift_iterations,
            tolerance: config.mean_shift_tolerance,
        };
        let sample: Vec<usize> = if n > config.mean_shift_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut s = sample_indices(&mut rng, n, config.mean_shift_samples).into_vec();
            s.sort_unstable();
            s
        } else {
            (0..n).collect()
        };
        let clusters = cluster_sampled(&emb, &ms, &sample)?;
        timings.clustering = t.elapsed().as_secs_f64();
        log::info!(
            "mean-shift: beta {:.4}, {} iterations, {} clusters",
            clusters.beta.beta(),
            clusters.iterations_run,
            clusters.num_clusters()
        );
        (
            merge_small(&clusters.hard_labels, &clusters.centers, config.min_segment_size),
            clusters.num_clusters(),
        )
    };
    let mut labels = vec![0; n];
    for (k, seg) in segments.iter().enumerate() {
        for &i in seg {
            labels[i] = k;
        }
    }

    let t = Instant::now();
    let scale = extent(&cloud.positions);
    let outcomes: Vec<SegmentOutcome> = segments
        .par_iter()
        .enumerate()
        .map(|(k, seg)| fit_one(cloud, seg, k, scale, config))
        .collect();
    timings.fitting = t.elapsed().as_secs_f64();

    let mut patches = Vec::new();
    let mut segment_patch = Vec::with_capacity(segments.len());
    let mut reports = Vec::with_capacity(segments.len());
    for (seg, out) in segments.iter().zip(outcomes) {
        warnings.extend(out.warnings);
        reports.push(out.report);
        match out.patch {
            Some(p) => {
                segment_patch.push(Some(patches.len()));
                patches.push(FittedPatch {
                    patch: p,
                    point_indices: seg.clone(),
                });
            }
            None => segment_patch.push(None),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    timings.total = start.elapsed().as_secs_f64();
    Ok(Decomposition {
        patch_set: SurfacePatchSet {
            patches,
            config: serde_json::to_value(config).ok(),
            metrics: None,
        },
        labels,
        segments,
        segment_patch,
        reports,
        clusters_before_merge,
        timings,
        warnings,
    })
}
