//! Mean-shift clustering on the unit hypersphere with a von Mises-Fisher
//! kernel `g(z, y) = exp(zᵀy / β²)`.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBOR_RANK: usize = 150;
pub const DEFAULT_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const BANDWIDTH_FLOOR: f64 = 1e-4;

// Kernel terms whose exponent falls this far below the row maximum are
// below 1e-26 relative and are skipped without calling exp.
const NEGLIGIBLE_EXPONENT: f64 = -60.0;

/// Kernel bandwidth β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 {
            Ok(Self(beta))
        } else {
            Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {beta}"
            )))
        }
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean distance from each row to its `neighbor_rank`-th nearest other row.
///
/// The rank is clamped to N−1. A zero estimate (for example identical rows)
/// is raised to [`BANDWIDTH_FLOOR`] with a warning.
pub fn estimate_bandwidth(embeddings: &EmbeddingMatrix, neighbor_rank: usize) -> Result<Bandwidth> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { required: 2, got: n });
    }
    if neighbor_rank == 0 {
        return Err(Error::InvalidArgument("neighbor rank must be at least 1".into()));
    }
    let k = neighbor_rank.min(n - 1);
    let total: f64 = (0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n - 1),
            |buf, i| {
                buf.clear();
                let yi = embeddings.row(i);
                buf.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(yi, embeddings.row(j))));
                let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
                kth.sqrt()
            },
        )
        .sum();
    let beta = total / n as f64;
    if beta < BANDWIDTH_FLOOR {
        warn!("degenerate bandwidth {beta:e}, clamping to {BANDWIDTH_FLOOR:e}");
        return Bandwidth::new(BANDWIDTH_FLOOR);
    }
    Bandwidth::new(beta)
}

/// Converged mean-shift iterate.
#[derive(Debug, Clone)]
pub struct MeanShift {
    pub embeddings: EmbeddingMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// One kernel-weighted mean of `y` seen from `z`, renormalized to unit length.
fn shift_row(z: &[f64], y: &EmbeddingMatrix, inv_beta2: f64, dots: &mut Vec<f64>, out: &mut [f64]) {
    dots.clear();
    dots.extend(y.rows().map(|yj| dot(z, yj) * inv_beta2));
    let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.fill(0.0);
    for (yj, &e) in y.rows().zip(dots.iter()) {
        let x = e - m;
        if x < NEGLIGIBLE_EXPONENT {
            continue;
        }
        let w = x.exp();
        for (o, v) in out.iter_mut().zip(yj) {
            *o += w * v;
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    } else {
        out.copy_from_slice(z);
    }
}

/// Runs mean-shift from `Y`, updating every row against the fixed data `Y`.
///
/// Stops once the largest row displacement in an iteration is below
/// `tolerance`, or after `max_iterations`.
pub fn mean_shift(
    embeddings: &EmbeddingMatrix,
    beta: Bandwidth,
    max_iterations: usize,
    tolerance: f64,
) -> Result<MeanShift> {
    if embeddings.is_empty() {
        return Err(Error::Empty("embeddings"));
    }
    let dim = embeddings.dim();
    let inv_beta2 = 1.0 / (beta.beta() * beta.beta());
    let mut z = embeddings.as_flat().to_vec();
    let mut next = z.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        let movement = next
            .par_chunks_mut(dim)
            .zip(z.par_chunks(dim))
            .map_init(Vec::new, |dots, (out, zi)| {
                shift_row(zi, embeddings, inv_beta2, dots, out);
                sq_dist(out, zi).sqrt()
            })
            .reduce(|| 0.0, f64::max);
        std::mem::swap(&mut z, &mut next);
        if !movement.is_finite() {
            return Err(Error::NonFinite("mean-shift iterate"));
        }
        if movement < tolerance {
            converged = true;
            break;
        }
    }
    Ok(MeanShift {
        embeddings: EmbeddingMatrix::from_flat(embeddings.len(), dim, z)?,
        iterations,
        converged,
    })
}

/// Hard clustering with soft memberships.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Unit cluster centers ordered by decreasing density.
    pub centers: Vec<Vec<f64>>,
    pub hard_labels: Vec<usize>,
    /// N×K row-stochastic soft memberships.
    pub membership: DMatrix<f64>,
    pub beta: Bandwidth,
    pub iterations_run: usize,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    /// One-hot N×K matrix of the hard labels.
    pub fn hard_membership(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.hard_labels.len(), self.centers.len());
        for (i, &k) in self.hard_labels.iter().enumerate() {
            w[(i, k)] = 1.0;
        }
        w
    }

    /// Point indices of each cluster.
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (i, &k) in self.hard_labels.iter().enumerate() {
            out[k].push(i);
        }
        out
    }
}

/// Row-wise softmax of `zᵢᵀc_k / β²` over centers.
pub fn soft_membership(z: &EmbeddingMatrix, centers: &[Vec<f64>], beta: Bandwidth) -> Result<DMatrix<f64>> {
    if centers.is_empty() {
        return Err(Error::Empty("cluster centers"));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != z.dim()) {
        return Err(Error::DimensionMismatch {
            expected: z.dim(),
            got: c.len(),
        });
    }
    let inv_beta2 = 1.0 / (beta.beta() * beta.beta());
    let k = centers.len();
    let mut w = DMatrix::zeros(z.len(), k);
    let mut logits = vec![0.0; k];
    for (i, zi) in z.rows().enumerate() {
        for (l, c) in logits.iter_mut().zip(centers) {
            *l = dot(zi, c) * inv_beta2;
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (col, l) in logits.iter().enumerate() {
            w[(i, col)] = (l - m).exp() / total;
        }
    }
    Ok(w)
}

fn argmax_row(w: &DMatrix<f64>, i: usize) -> usize {
    let mut best = 0;
    for k in 1..w.ncols() {
        if w[(i, k)] > w[(i, best)] {
            best = k;
        }
    }
    best
}

/// Non-maximum suppression of converged embeddings into cluster centers.
///
/// Points are visited in order of decreasing kernel density (ties by lower
/// index); a point becomes a center unless an earlier center lies within
/// Euclidean distance β. Every point is labeled with its most probable
/// center under [`soft_membership`], which is also its nearest center.
pub fn extract_clusters(z: &EmbeddingMatrix, y: &EmbeddingMatrix, beta: Bandwidth) -> Result<ClusterResult> {
    if z.len() != y.len() || z.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: y.len() * y.dim(),
            got: z.len() * z.dim(),
        });
    }
    if z.is_empty() {
        return Err(Error::Empty("embeddings"));
    }
    let inv_beta2 = 1.0 / (beta.beta() * beta.beta());
    // Log-density keeps the comparison finite for tiny bandwidths.
    let log_density: Vec<f64> = (0..z.len())
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let e: Vec<f64> = y.rows().map(|yj| dot(zi, yj) * inv_beta2).collect();
            let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + e.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        })
        .collect();
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| log_density[b].total_cmp(&log_density[a]).then(a.cmp(&b)));
    let radius2 = beta.beta() * beta.beta();
    let mut centers: Vec<Vec<f64>> = Vec::new();
    for &i in &order {
        let zi = z.row(i);
        if centers.iter().all(|c| sq_dist(c, zi) > radius2) {
            centers.push(zi.to_vec());
        }
    }
    let membership = soft_membership(z, &centers, beta)?;
    let hard_labels = (0..z.len()).map(|i| argmax_row(&membership, i)).collect();
    Ok(ClusterResult {
        centers,
        hard_labels,
        membership,
        beta,
        iterations_run: 0,
    })
}

/// Settings for [`cluster`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig {
    pub neighbor_rank: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            neighbor_rank: DEFAULT_NEIGHBOR_RANK,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Bandwidth estimation, mean-shift and center extraction in one call.
pub fn cluster(embeddings: &EmbeddingMatrix, config: &MeanShiftConfig) -> Result<ClusterResult> {
    let beta = if embeddings.len() < 2 {
        Bandwidth::new(BANDWIDTH_FLOOR)?
    } else {
        estimate_bandwidth(embeddings, config.neighbor_rank)?
    };
    let shifted = mean_shift(embeddings, beta, config.max_iterations, config.tolerance)?;
    let mut result = extract_clusters(&shifted.embeddings, embeddings, beta)?;
    result.iterations_run = shifted.iterations;
    Ok(result)
}

/// [`cluster`] with mean-shift restricted to the rows in `sample`.
///
/// The bandwidth is estimated on all rows so `neighbor_rank` keeps its
/// meaning; the shifted sample yields the centers, and every row is then
/// labeled by its soft membership to them. Returns [`cluster`]'s result when
/// `sample` covers every row.
pub fn cluster_sampled(
    embeddings: &EmbeddingMatrix,
    config: &MeanShiftConfig,
    sample: &[usize],
) -> Result<ClusterResult> {
    if sample.is_empty() {
        return Err(Error::Empty("mean-shift sample"));
    }
    if let Some(&i) = sample.iter().find(|&&i| i >= embeddings.len()) {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            got: i + 1,
        });
    }
    if sample.len() == embeddings.len() {
        return cluster(embeddings, config);
    }
    let beta = estimate_bandwidth(embeddings, config.neighbor_rank)?;
    let y = embeddings.select(sample);
    let shifted = mean_shift(&y, beta, config.max_iterations, config.tolerance)?;
    let centers = extract_clusters(&shifted.embeddings, &y, beta)?.centers;
    let membership = soft_membership(embeddings, &centers, beta)?;
    let hard_labels = (0..embeddings.len()).map(|i| argmax_row(&membership, i)).collect();
    Ok(ClusterResult {
        centers,
        hard_labels,
        membership,
        beta,
        iterations_run: shifted.iterations,
    })
}
