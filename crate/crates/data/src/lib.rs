//! Synthetic scenes, camera ingestion and file formats.
//!
//! Everything the engine reads or writes lives here: procedurally textured
//! analytic scenes with exact ray-traced ground truth, NeRF-style
//! `transforms.json` camera sets, versioned binary checkpoints, 8-bit PNG
//! images and binary little-endian PLY meshes.

use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod imageio;
pub mod meshio;
pub mod scene;
pub mod transforms;

pub use checkpoint::{checkpoint_read, checkpoint_write, CheckpointMeta};
pub use imageio::{load_png, save_png};
pub use meshio::{load_ply, save_ply};
pub use scene::{make_scene, SceneBundle, SceneKind, SceneParams, SeedPoint, TextureKind};
pub use transforms::{load_transforms, save_transforms, FrameCamera};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("frame {index}: {reason}")]
    Frame { index: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("unsupported ply: {0}")]
    UnsupportedPly(String),
    #[error("unknown scene kind {0:?} (expected textured_plane, sphere, plane_plus_sphere or checker_box)")]
    UnknownKind(String),
    #[error("unknown texture {0:?} (expected checker, noise or mottled)")]
    UnknownTexture(String),
    #[error(transparent)]
    Core(#[from] surfelsplat_core::CoreError),
}

impl DataError {
    /// Adapter for `map_err` that tags an I/O error with the path involved.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
