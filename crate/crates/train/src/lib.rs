//! Three-stage surfel training.
//!
//! Stage 1 trains every parameter with normal consistency and adaptive
//! density control. Each surfel is then scored by the photometric error its
//! footprint accumulates across all training views, and the top K percent
//! become high-error Gaussians (HEGs). Stage 2 fine-tunes only the HEGs' SH
//! coefficients with everything else frozen and normal consistency off.
//! Stage 3 clones each HEG in place, freezes every opacity and trains the
//! remaining parameters with normal consistency restored.

use thiserror::Error;

use surfelsplat_core::CoreError;
use surfelsplat_data::DataError;
use surfelsplat_geom::GeomError;

pub mod densify;
pub mod errors;
pub mod optim;
pub mod pipeline;
pub mod stages;

pub use densify::{densify_and_prune, reset_opacity, DensifyConfig, DensifyStats};
pub use errors::{
    clone_in_place, compute_error_scores, mark_hegs, select_hegs, ErrorScores, Partition,
};
pub use optim::{AdamParams, LearningRates, OptimState, StepRates};
pub use pipeline::{
    evaluate_model, pipeline_stage1, pipeline_stage2, pipeline_stage3, run_pipeline, EvalConfig,
    PipelineArtifacts, PipelineConfig, StageArtifacts,
};
pub use stages::{
    build_freeze, mean_psnr, train_stage, FreezePolicy, LoopConfig, StageLog, StagePlan,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} diverged at iteration {iteration}: loss = {loss}")]
    Diverged { stage: u32, iteration: usize, loss: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty surfel set")]
    EmptySet,
    #[error("empty high-error selection")]
    EmptyHegSet,
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Data(#[from] DataError),
}
