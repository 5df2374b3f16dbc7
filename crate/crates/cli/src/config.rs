//! Run configuration: a JSON mirror of every scene, trainer and evaluation
//! knob, plus the error type that fixes the exit-code contract.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use surfelsplat_core::CoreError;
use surfelsplat_data::scene::{SceneKind, SceneParams, TextureKind};
use surfelsplat_data::DataError;
use surfelsplat_geom::GeomError;
use surfelsplat_train::{PipelineConfig, TrainError};

/// CLI failure with its exit code: `Usage` exits 2 (bad flags, bad config,
/// missing inputs), `Numeric` exits 3 (divergence, metric failures).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) | Self::Numeric(msg) => f.write_str(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        // Unreadable, malformed or missing inputs are usage errors.
        Self::Usage(e.to_string())
    }
}

impl From<GeomError> for CliError {
    fn from(e: GeomError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::EmptySet | TrainError::EmptyHegSet => {
                Self::Usage(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            TrainError::Diverged { .. } | TrainError::Core(_) | TrainError::Geom(_) => {
                Self::Numeric(e.to_string())
            }
        }
    }
}

/// Scene half of the run config; kinds are spelled out so configs stay
/// readable (`"sphere"`, `"checker"`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// textured_plane | sphere | plane_plus_sphere | checker_box
    pub kind: String,
    /// checker | noise | mottled
    pub texture: String,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub ring_radius: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub texture_scale: f64,
    pub seed_points: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        let p = SceneParams::default();
        Self {
            kind: p.kind.name().into(),
            texture: p.texture.name().into(),
            views: p.n_cameras,
            width: p.width,
            height: p.height,
            ring_radius: p.ring_radius,
            focal_factor: p.focal_factor,
            texture_scale: p.texture_scale,
            seed_points: p.n_seed_points,
        }
    }
}

impl SceneSection {
    pub fn to_params(&self) -> Result<SceneParams, CliError> {
        Ok(SceneParams {
            kind: SceneKind::from_str(&self.kind)?,
            texture: TextureKind::from_str(&self.texture)?,
            n_cameras: self.views,
            ring_radius: self.ring_radius,
            width: self.width,
            height: self.height,
            focal_factor: self.focal_factor,
            texture_scale: self.texture_scale,
            n_seed_points: self.seed_points,
        })
    }
}

/// Everything a training run needs. The top-level `seed` drives both scene
/// generation and training; it overrides `pipeline.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSection,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    /// Propagates the master seed into the pipeline section.
    pub fn resolve(&mut self) {
        self.pipeline.seed = self.seed;
    }
}

/// Loads a run config, or the documented defaults when no path is given.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
    }
}

/// Writes pretty JSON, creating parent directories as needed.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Usage(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let err = serde_json::from_str::<RunConfig>(r#"{ "sceen": {} }"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let nested = r#"{ "pipeline": { "iterations": [1, 1, 1], "warp_speed": true } }"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn defaults_round_trip_and_seed_resolves() {
        let mut cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.seed = 9;
        cfg.resolve();
        assert_eq!(cfg.pipeline.seed, 9);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exit_codes_match_the_contract() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 3);
        let diverged = TrainError::Diverged { stage: 1, iteration: 3, loss: f64::NAN };
        assert_eq!(CliError::from(diverged).exit_code(), 3);
        let bad = TrainError::InvalidConfig("k".into());
        assert_eq!(CliError::from(bad).exit_code(), 2);
    }
}
