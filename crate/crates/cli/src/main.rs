use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use parsefit_core::bspline::{fit_control_grid, fit_control_grid_smooth, init_parametrization, BSplinePatch};
use parsefit_core::io::{
    patches_to_obj, read_patch_set, read_point_cloud, write_patch_set, write_point_cloud, MESH_GRID,
};
use parsefit_core::metrics::{evaluate, EvalConfig, SegmentLabeling};
use parsefit_core::pipeline::{decompose, EmbeddingSource, FittedPatch, PipelineConfig, SurfacePatchSet};
use parsefit_core::primitives::DistanceEvaluator;
use parsefit_core::ransac::{detect_primitives, RansacConfig};
use parsefit_core::synth::{scene_by_name, SCENE_NAMES};
use parsefit_core::PrimitivePatch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fits parametric surface patches to point clouds.
#[derive(Parser, Debug)]
#[command(name = "parsefit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a point cloud and fit one patch per segment.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Per-point embeddings ("N D" header, then N rows); replaces the
        /// geometric embedding.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON pipeline configuration; unknown keys are rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the trimmed patches as an OBJ mesh.
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a predicted patch set against a ground-truth one.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Seed of the Chamfer sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a single B-spline patch to all input points.
    Splinefit {
        #[arg(long)]
        input: PathBuf,
        /// Control grid as ROWSxCOLS.
        #[arg(long, default_value = "20x20", value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        closed_u: bool,
        /// Relative smoothness weight; plain least squares when omitted.
        #[arg(long)]
        smoothing: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Detect basic primitives with the sequential RANSAC baseline.
    Ransac {
        #[arg(long)]
        input: PathBuf,
        /// JSON RANSAC configuration; unknown keys are rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic test scene.
    Synth {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SCENE_NAMES))]
        scene: String,
        #[arg(long)]
        output: PathBuf,
        /// Also write the generating patches and segments as a patch set.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad grid size {t:?}: {e}"))
    };
    let (r, c) = (parse(r)?, parse(c)?);
    if r < 4 || c < 4 {
        return Err(format!("cubic patches need at least 4x4 control points, got {r}x{c}"));
    }
    Ok((r, c))
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Bad arguments or unreadable inputs (exit 1).
    Usage(anyhow::Error),
    /// Inputs were valid but fitting failed (exit 2).
    Fit(anyhow::Error),
}

trait Classify<T> {
    fn usage(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
    fn fit(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into().context(what())))
    }
    fn fit(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Fit(e.into().context(what())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn fit(
    input: &Path,
    embeddings: Option<PathBuf>,
    config: Option<PathBuf>,
    output: &Path,
    mesh: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cloud = read_point_cloud(input).usage(|| format!("reading {}", input.display()))?;
    let mut cfg: PipelineConfig = match &config {
        Some(p) => read_json(p).usage(|| "invalid configuration".into())?,
        None => PipelineConfig::default(),
    };
    if let Some(path) = embeddings {
        cfg.embedding = EmbeddingSource::File { path };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().usage(|| "invalid configuration".into())?;
    let d = decompose(&cloud, &cfg).fit(|| "decomposition failed".into())?;
    for w in &d.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "{} segments, {} patches in {:.2}s",
        d.segments.len(),
        d.patch_set.patches.len(),
        d.timings.total
    );
    write_patch_set(output, &d.patch_set).usage(|| format!("writing {}", output.display()))?;
    if let Some(path) = mesh {
        let obj = patches_to_obj(&d.patch_set, &cloud.positions, MESH_GRID).fit(|| "mesh export failed".into())?;
        std::fs::write(&path, obj).usage(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Labeling of a patch set over `n` points. Points outside every segment
/// join the predicted patch nearest to them.
fn labeling_of(set: &SurfacePatchSet, points: &[parsefit_core::Point3]) -> anyhow::Result<SegmentLabeling> {
    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    for (k, p) in set.patches.iter().enumerate() {
        for &i in &p.point_indices {
            let slot = labels
                .get_mut(i)
                .ok_or_else(|| anyhow!("point index {i} out of range for {n} points"))?;
            if *slot != usize::MAX {
                return Err(anyhow!("point {i} belongs to two patches"));
            }
            *slot = k;
        }
    }
    if labels.contains(&usize::MAX) {
        if set.patches.is_empty() {
            return Err(anyhow!("patch set is empty"));
        }
        let evals: Vec<DistanceEvaluator> = set.patches.iter().map(|p| DistanceEvaluator::new(&p.patch)).collect();
        for (i, l) in labels.iter_mut().enumerate().filter(|(_, l)| **l == usize::MAX) {
            *l = (0..evals.len())
                .min_by(|&a, &b| evals[a].distance(&points[i]).total_cmp(&evals[b].distance(&points[i])))
                .expect("non-empty");
        }
    }
    Ok(SegmentLabeling::new(
        labels,
        set.patches.iter().map(FittedPatch::kind).collect(),
    )?)
}

fn eval(pred: &Path, truth: &Path, points: &Path, report: &Path, seed: u64) -> Result<(), Failure> {
    let cloud = read_point_cloud(points).usage(|| format!("reading {}", points.display()))?;
    let pred_set = read_patch_set(pred).usage(|| format!("reading {}", pred.display()))?;
    let truth_set = read_patch_set(truth).usage(|| format!("reading {}", truth.display()))?;
    let p = labeling_of(&pred_set, &cloud.positions).usage(|| "predicted patch set".into())?;
    let t = labeling_of(&truth_set, &cloud.positions).usage(|| "ground-truth patch set".into())?;
    let patches: Vec<PrimitivePatch> = pred_set.patches.iter().map(|f| f.patch.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = evaluate(&cloud.positions, &p, &patches, &t, &EvalConfig::default(), &mut rng)
        .fit(|| "evaluation failed".into())?;
    let text = serde_json::to_string_pretty(&metrics).usage(|| "serializing report".into())?;
    std::fs::write(report, text).usage(|| format!("writing {}", report.display()))
}

fn splinefit(
    input: &Path,
    grid: (usize, usize),
    closed_u: bool,
    smoothing: Option<f64>,
    output: &Path,
) -> Result<(), Failure> {
    let cloud = read_point_cloud(input).usage(|| format!("reading {}", input.display()))?;
    let uv = init_parametrization(&cloud.positions).fit(|| "parametrization failed".into())?;
    let samples: Vec<_> = uv.into_iter().zip(cloud.positions.iter().copied()).collect();
    let control = match smoothing {
        Some(w) => fit_control_grid_smooth(&samples, grid.0, grid.1, closed_u, false, w),
        None => fit_control_grid(&samples, grid.0, grid.1, closed_u, false),
    }
    .fit(|| format!("fitting a {}x{} grid", grid.0, grid.1))?;
    let patch = BSplinePatch::new(control).fit(|| "building the patch".into())?;
    let set = SurfacePatchSet {
        patches: vec![FittedPatch {
            patch: PrimitivePatch::BSpline(patch),
            point_indices: (0..cloud.len()).collect(),
        }],
        config: Some(serde_json::json!({ "grid": [grid.0, grid.1], "closed_u": closed_u, "smoothing": smoothing })),
        metrics: None,
    };
    write_patch_set(output, &set).usage(|| format!("writing {}", output.display()))
}

fn ransac(input: &Path, config: Option<PathBuf>, output: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cloud = read_point_cloud(input).usage(|| format!("reading {}", input.display()))?;
    let mut cfg: RansacConfig = match &config {
        Some(p) => read_json(p).usage(|| "invalid configuration".into())?,
        None => RansacConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().usage(|| "invalid configuration".into())?;
    if !cloud.has_normals() {
        return Err(Failure::Usage(anyhow!(
            "RANSAC needs per-point normals (6 values per line)"
        )));
    }
    let result = detect_primitives(&cloud, &cfg).fit(|| "RANSAC failed".into())?;
    log::info!(
        "{} primitives, coverage {:.3} (restart {})",
        result.detections.len(),
        result.coverage,
        result.run
    );
    let set = SurfacePatchSet {
        patches: result
            .detections
            .into_iter()
            .map(|d| FittedPatch {
                patch: d.patch,
                point_indices: d.inliers,
            })
            .collect(),
        config: serde_json::to_value(cfg).ok(),
        metrics: None,
    };
    write_patch_set(output, &set).usage(|| format!("writing {}", output.display()))
}

fn synth(scene: &str, output: &Path, truth: Option<PathBuf>, seed: u64) -> Result<(), Failure> {
    let s = scene_by_name(scene, seed).usage(|| format!("building scene {scene:?}"))?;
    write_point_cloud(output, &s.cloud).usage(|| format!("writing {}", output.display()))?;
    if let Some(path) = truth {
        let set = SurfacePatchSet {
            patches: s
                .patches
                .iter()
                .cloned()
                .zip(s.segments())
                .map(|(patch, point_indices)| FittedPatch { patch, point_indices })
                .collect(),
            config: Some(serde_json::json!({ "scene": scene, "seed": seed })),
            metrics: None,
        };
        write_patch_set(&path, &set).usage(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit {
            input,
            embeddings,
            config,
            output,
            mesh,
            seed,
        } => fit(&input, embeddings, config, &output, mesh, seed),
        Command::Eval {
            pred,
            truth,
            points,
            report,
            seed,
        } => eval(&pred, &truth, &points, &report, seed),
        Command::Splinefit {
            input,
            grid,
            closed_u,
            smoothing,
            output,
        } => splinefit(&input, grid, closed_u, smoothing, &output),
        Command::Ransac {
            input,
            config,
            output,
            seed,
        } => ransac(&input, config, &output, seed),
        Command::Synth {
            scene,
            output,
            truth,
            seed,
        } => synth(&scene, &output, truth, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Fit(e)) => {
            eprintln!("fit failed: {e:#}");
            ExitCode::from(2)
        }
    }
}
