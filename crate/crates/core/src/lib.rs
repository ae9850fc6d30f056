//! Decomposition of raw point clouds into parametric surface patches.
//!
//! The crate covers the analytic side of the problem: embedding-space
//! mean-shift segmentation, least-squares fitting of planes, spheres,
//! cylinders, cones and cubic B-spline patches, post-fit refinement of
//! spline patches, training-loss value functions and evaluation metrics.

// `!(x > 0.0)` checks double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod bspline;
pub mod clustering;
pub mod embedding;
pub mod error;
pub mod geom;
pub mod io;
pub mod losses;
mod lsq;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod primitives;
pub mod ransac;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Point3, PointCloud};
pub use primitives::{PrimitiveKind, PrimitivePatch};
