//! Synthetic test scenes with known segmentation and generating patches.
//!
//! Point noise follows the augmentation used for training data: positions
//! move along their normal by a uniform offset in [−0.01, 0.01] and normals
//! are tilted by a uniform angle in [−3°, 3°].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bspline::{BSplinePatch, ControlGrid};
use crate::error::{Error, Result};
use crate::geom::{any_perpendicular, rotation, Point3, PointCloud};
use crate::primitives::{Cone, Cylinder, Plane, PrimitiveKind, PrimitivePatch, Sphere};

pub const POSITION_NOISE: f64 = 0.01;
pub const NORMAL_NOISE_DEGREES: f64 = 3.0;

/// Noise applied to generated samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub position: f64,
    pub normal_degrees: f64,
}

impl Noise {
    pub const NONE: Noise = Noise {
        position: 0.0,
        normal_degrees: 0.0,
    };
    pub const TRAINING: Noise = Noise {
        position: POSITION_NOISE,
        normal_degrees: NORMAL_NOISE_DEGREES,
    };
}

/// A point cloud together with its generating patches and segmentation.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    /// Generating segment of every point.
    pub labels: Vec<usize>,
    pub patches: Vec<PrimitivePatch>,
}

impl SyntheticScene {
    pub fn kinds(&self) -> Vec<PrimitiveKind> {
        self.patches.iter().map(PrimitivePatch::kind).collect()
    }

    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.patches.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Exact copy scaled about the origin by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let positions = self.cloud.positions.iter().map(|p| p * s).collect();
        let patches = self
            .patches
            .iter()
            .map(|p| match p {
                PrimitivePatch::Plane(x) => PrimitivePatch::Plane(Plane {
                    normal: x.normal,
                    offset: x.offset * s,
                }),
                PrimitivePatch::Sphere(x) => PrimitivePatch::Sphere(Sphere {
                    center: x.center * s,
                    radius: x.radius * s,
                }),
                PrimitivePatch::Cylinder(x) => PrimitivePatch::Cylinder(Cylinder {
                    center: x.center * s,
                    direction: x.direction,
                    radius: x.radius * s,
                }),
                PrimitivePatch::Cone(x) => PrimitivePatch::Cone(Cone { apex: x.apex * s, ..*x }),
                PrimitivePatch::BSpline(b) => {
                    PrimitivePatch::BSpline(BSplinePatch::new(b.grid().map_points(|c| c * s)).expect("same grid"))
                }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            cloud: PointCloud::new(positions, self.cloud.normals.clone())?,
            labels: self.labels.clone(),
            patches,
        })
    }
}

/// Accumulates noisy samples of several patches.
#[derive(Debug, Default)]
pub struct SceneBuilder {
    positions: Vec<Point3>,
    normals: Vec<Point3>,
    labels: Vec<usize>,
    patches: Vec<PrimitivePatch>,
}

impl SceneBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` samples drawn by `sample`, which returns a surface point
    /// and its unit normal.
    pub fn add<R: Rng>(
        &mut self,
        patch: PrimitivePatch,
        count: usize,
        noise: Noise,
        rng: &mut R,
        mut sample: impl FnMut(&mut R) -> (Point3, Point3),
    ) -> &mut Self {
        let label = self.patches.len();
        self.patches.push(patch);
        for _ in 0..count {
            let (p, n) = sample(rng);
            let (p, n) = perturb(p, n, noise, rng);
            self.positions.push(p);
            self.normals.push(n);
            self.labels.push(label);
        }
        self
    }

    pub fn build(self) -> Result<SyntheticScene> {
        Ok(SyntheticScene {
            cloud: PointCloud::with_normalized(self.positions, Some(self.normals))?,
            labels: self.labels,
            patches: self.patches,
        })
    }
}

/// Moves `p` along `n` and tilts `n` about a random perpendicular axis.
pub fn perturb<R: Rng>(p: Point3, n: Point3, noise: Noise, rng: &mut R) -> (Point3, Point3) {
    let mut p = p;
    let mut n = n;
    if noise.position > 0.0 {
        p += n * rng.random_range(-noise.position..=noise.position);
    }
    if noise.normal_degrees > 0.0 {
        let e1 = any_perpendicular(&n);
        let e2 = n.cross(&e1);
        let phi = rng.random_range(0.0..2.0 * PI);
        let axis = e1 * phi.cos() + e2 * phi.sin();
        let angle = rng
            .random_range(-noise.normal_degrees..=noise.normal_degrees)
            .to_radians();
        n = (rotation(&axis, angle) * n).normalize();
    }
    (p, n)
}

/// Uniform samples of a `width`×`height` rectangle centered at `center` on
/// the plane with unit normal `normal`.
pub fn plane_sampler(
    center: Point3,
    normal: Point3,
    width: f64,
    height: f64,
) -> (PrimitivePatch, impl FnMut(&mut ChaCha8Rng) -> (Point3, Point3)) {
    let normal = normal.normalize();
    let e1 = any_perpendicular(&normal);
    let e2 = normal.cross(&e1);
    let patch = PrimitivePatch::Plane(Plane {
        normal,
        offset: normal.dot(&center),
    });
    let sample = move |rng: &mut ChaCha8Rng| {
        let a = rng.random_range(-0.5..0.5) * width;
        let b = rng.random_range(-0.5..0.5) * height;
        (center + e1 * a + e2 * b, normal)
    };
    (patch, sample)
}

/// Area-uniform samples of the spherical cap within `max_angle` of `pole`.
pub fn sphere_cap_sampler(
    center: Point3,
    radius: f64,
    pole: Point3,
    max_angle: f64,
) -> (PrimitivePatch, impl FnMut(&mut ChaCha8Rng) -> (Point3, Point3)) {
    let pole = pole.normalize();
    let e1 = any_perpendicular(&pole);
    let e2 = pole.cross(&e1);
    let patch = PrimitivePatch::Sphere(Sphere { center, radius });
    let min_cos = max_angle.cos();
    let sample = move |rng: &mut ChaCha8Rng| {
        let c = rng.random_range(min_cos..=1.0);
        let s = (1.0 - c * c).max(0.0).sqrt();
        let phi = rng.random_range(0.0..2.0 * PI);
        let n = pole * c + (e1 * phi.cos() + e2 * phi.sin()) * s;
        (center + n * radius, n)
    };
    (patch, sample)
}

/// Area-uniform samples of a cylinder arc. `facing` fixes the middle of the
/// arc, which spans `±half_arc` around it; heights run over `h` along `axis`.
pub fn cylinder_arc_sampler(
    center: Point3,
    axis: Point3,
    radius: f64,
    facing: Point3,
    half_arc: f64,
    h: (f64, f64),
) -> (PrimitivePatch, impl FnMut(&mut ChaCha8Rng) -> (Point3, Point3)) {
    let axis = axis.normalize();
    let e1 = (facing - axis * facing.dot(&axis)).normalize();
    let e2 = axis.cross(&e1);
    let patch = PrimitivePatch::Cylinder(Cylinder {
        center,
        direction: axis,
        radius,
    });
    let sample = move |rng: &mut ChaCha8Rng| {
        let phi = rng.random_range(-half_arc..=half_arc);
        let t = rng.random_range(h.0..=h.1);
        let n = e1 * phi.cos() + e2 * phi.sin();
        (center + axis * t + n * radius, n)
    };
    (patch, sample)
}

/// Area-uniform samples of a cone band between slant lengths `slant`,
/// restricted to azimuths within `±half_arc` of `facing`.
pub fn cone_band_sampler(
    apex: Point3,
    axis: Point3,
    half_angle: f64,
    facing: Point3,
    half_arc: f64,
    slant: (f64, f64),
) -> (PrimitivePatch, impl FnMut(&mut ChaCha8Rng) -> (Point3, Point3)) {
    let axis = axis.normalize();
    let e1 = (facing - axis * facing.dot(&axis)).normalize();
    let e2 = axis.cross(&e1);
    let patch = PrimitivePatch::Cone(Cone {
        apex,
        direction: axis,
        half_angle,
    });
    let (sn, cs) = half_angle.sin_cos();
    let sample = move |rng: &mut ChaCha8Rng| {
        let phi = rng.random_range(-half_arc..=half_arc);
        let w: f64 = rng.random();
        let l = (slant.0 * slant.0 + w * (slant.1 * slant.1 - slant.0 * slant.0)).sqrt();
        let radial = e1 * phi.cos() + e2 * phi.sin();
        let p = apex + (axis * cs + radial * sn) * l;
        let n = radial * cs - axis * sn;
        (p, n)
    };
    (patch, sample)
}

/// Random-parameter samples of a B-spline patch, with normals oriented to
/// have a positive dot product with `facing`.
pub fn bspline_sampler(
    patch: BSplinePatch,
    facing: Point3,
) -> (PrimitivePatch, impl FnMut(&mut ChaCha8Rng) -> (Point3, Point3)) {
    let surface = patch.clone();
    let sample = move |rng: &mut ChaCha8Rng| {
        let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
        let (p, su, sv) = surface.eval_with_derivs(u, v);
        let mut n = su.cross(&sv).normalize();
        if n.dot(&facing) < 0.0 {
            n = -n;
        }
        (p, n)
    };
    (PrimitivePatch::BSpline(patch), sample)
}

/// Wavy open 8×8 height-field patch `x = x0 + h(y, z)` over a square of side
/// `size` centered at `(y0, z0)`.
pub fn wavy_bspline(x0: f64, y0: f64, z0: f64, size: f64, amplitude: f64) -> BSplinePatch {
    let n = 8;
    let pts = (0..n * n)
        .map(|k| {
            let (p, q) = (k / n, k % n);
            let a = p as f64 / (n - 1) as f64;
            let b = q as f64 / (n - 1) as f64;
            let h = amplitude * (PI * 2.0 * a).sin() * (PI * 2.0 * b + 0.3).cos();
            Point3::new(x0 + h, y0 + (a - 0.5) * size, z0 + (b - 0.5) * size)
        })
        .collect();
    BSplinePatch::new(ControlGrid::new(n, n, pts, false, false).expect("valid grid")).expect("valid patch")
}

/// Plane, cylinder and sphere patches, `per_patch` noisy points each, laid
/// out on a unit-scale 2×2 grid with every normal facing +x. With
/// `with_spline`, a wavy B-spline patch fills the fourth cell.
pub fn mixed_scene(per_patch: usize, with_spline: bool, noise: Noise, seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SceneBuilder::new();
    let (patch, s) = plane_sampler(Point3::new(0.2, 0.2, 0.2), Point3::new(1.0, 0.15, 0.1), 0.35, 0.35);
    b.add(patch, per_patch, noise, &mut rng, s);
    let (patch, s) = cylinder_arc_sampler(
        Point3::new(0.0, 0.8, 0.0),
        Point3::z(),
        0.22,
        Point3::x(),
        70f64.to_radians(),
        (0.05, 0.4),
    );
    b.add(patch, per_patch, noise, &mut rng, s);
    let (patch, s) = sphere_cap_sampler(Point3::new(0.0, 0.2, 0.8), 0.22, Point3::x(), 65f64.to_radians());
    b.add(patch, per_patch, noise, &mut rng, s);
    if with_spline {
        let (patch, s) = bspline_sampler(wavy_bspline(0.2, 0.8, 0.8, 0.35, 0.12), Point3::x());
        b.add(patch, per_patch, noise, &mut rng, s);
    }
    b.build()
}

/// Names accepted by [`scene_by_name`].
pub const SCENE_NAMES: [&str; 5] = ["plane", "basic", "primitives", "mixed", "cone"];

/// Named test scenes:
/// - `plane`: 1000 noiseless points on one plane.
/// - `basic`: plane, cylinder and sphere with 1500 noiseless points each.
/// - `primitives`: plane, cylinder and sphere with 2500 noisy points each.
/// - `mixed`: `primitives` plus a wavy B-spline patch (10k points).
/// - `cone`: 1500 noisy points on a cone band.
pub fn scene_by_name(name: &str, seed: u64) -> Result<SyntheticScene> {
    match name {
        "plane" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = SceneBuilder::new();
            let (patch, s) = plane_sampler(Point3::new(0.5, 0.5, 0.5), Point3::new(0.3, 0.2, 1.0), 1.0, 1.0);
            b.add(patch, 1000, Noise::NONE, &mut rng, s);
            b.build()
        }
        "basic" => mixed_scene(1500, false, Noise::NONE, seed),
        "primitives" => mixed_scene(2500, false, Noise::TRAINING, seed),
        "mixed" => mixed_scene(2500, true, Noise::TRAINING, seed),
        "cone" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = SceneBuilder::new();
            let (patch, s) = cone_band_sampler(
                Point3::new(0.0, 0.5, 0.5),
                Point3::x(),
                0.5,
                Point3::y(),
                PI,
                (0.3, 0.8),
            );
            b.add(patch, 1500, Noise::TRAINING, &mut rng, s);
            b.build()
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown scene {other:?}; expected one of {}",
            SCENE_NAMES.join(", ")
        ))),
    }
}
