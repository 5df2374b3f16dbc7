//! Mesh extraction and quantitative evaluation.
//!
//! Turns rendered depth maps into a triangle mesh (projective TSDF fusion
//! followed by marching cubes) and scores reconstructions with Chamfer
//! distance, F-score, PSNR, SSIM and per-surfel attribute statistics.

use thiserror::Error;

pub mod marching;
pub mod mesh;
pub mod metrics;
pub mod tables;
pub mod tsdf;

pub use marching::marching_cubes;
pub use mesh::{chamfer_and_fscore, ChamferResult, Mesh};
pub use metrics::{attribute_stats, psnr, ssim, AttributeStats, MetricsReport};
pub use tsdf::{tsdf_integrate, TsdfVolume};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("depth/accum map is {0}x{1} but the camera is {2}x{3}")]
    VolumeCameraMismatch(usize, usize, usize, usize),
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("mesh is invalid: {0}")]
    InvalidMesh(String),
    #[error("surfel set is empty")]
    EmptySet,
    #[error(transparent)]
    Core(#[from] surfelsplat_core::CoreError),
}
