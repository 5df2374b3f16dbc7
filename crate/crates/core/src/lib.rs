//! Differentiable 2D Gaussian surfel splatting on the CPU.
//!
//! A surfel is a planar elliptical Gaussian with a world-space center, a
//! tangent frame stored as a quaternion, two log-scales, a sigmoid opacity
//! and spherical-harmonics color. Rendering intersects pixel rays with each
//! splat plane in closed form and alpha-composites front to back, producing
//! color, mean/median depth, accumulation and normal maps plus the per-pixel
//! contribution lists needed by the loss terms and the analytic backward
//! pass. Everything is `f64` and deterministic for a fixed input order.

pub mod camera;
pub mod grad;
pub mod image;
pub mod kernel;
pub mod losses;
pub mod math;
pub mod raster;
pub mod sh;
pub mod surfel;

pub use camera::Camera;
pub use grad::{backward, gradcheck, FreezeMask, GradCheckConfig, GradCheckReport, ParamGrads, TermMix};
pub use image::{Image1, Image3};
pub use kernel::{build_h_matrix, intersect, Intersection, KernelOptions};
pub use losses::{LossGrads, LossWeights};
pub use raster::{footprint_pass, render, Contribution, FootprintRecord, RenderOptions, RenderOutputs};
pub use surfel::{Surfel, SurfelSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid surfel {id}: {reason}")]
    InvalidSurfel { id: u64, reason: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("render outputs carry no per-pixel contributions (retain_contributions was off)")]
    MissingContributions,
    #[error("empty surfel set")]
    EmptySurfelSet,
}
