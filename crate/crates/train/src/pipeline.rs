//! End-to-end pipeline: three stages, per-stage checkpoints and metrics.
//!
//! Every artifact write is atomic (write to a temp file, then rename), and
//! a failed run leaves a `failure.json` marker beside whatever stages had
//! already completed. Given the same scene and seed the run is fully
//! deterministic, down to checkpoint bytes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use surfelsplat_core::losses::LossWeights;
use surfelsplat_core::raster::render;
use surfelsplat_core::{RenderOptions, SurfelSet};
use surfelsplat_data::checkpoint::{checkpoint_write, CheckpointMeta};
use surfelsplat_data::scene::SceneBundle;
use surfelsplat_data::DataError;
use surfelsplat_geom::{
    attribute_stats, chamfer_and_fscore, marching_cubes, psnr, ssim, tsdf_integrate,
    MetricsReport, TsdfVolume,
};

use crate::densify::DensifyConfig;
use crate::errors::{clone_in_place, compute_error_scores, mark_hegs, select_hegs, Partition};
use crate::optim::{AdamParams, LearningRates, OptimState};
use crate::stages::{train_stage, FreezePolicy, LoopConfig, StageLog, StagePlan};
use crate::TrainError;

/// Mesh-extraction and metric settings for the per-stage reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// TSDF voxel size; 0 picks `scene extent / 24`.
    pub voxel_size: f64,
    /// F-score distance threshold.
    pub tau: f64,
    /// Point samples per mesh for Chamfer/F-score.
    pub mesh_samples: usize,
    /// Sampling seed for the mesh metrics.
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { voxel_size: 0.0, tau: 0.05, mesh_samples: 8000, sample_seed: 17 }
    }
}

/// All training hyperparameters, JSON-loadable with documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Full-scale stage lengths; multiplied by `iter_scale`.
    pub iterations: [usize; 3],
    /// Global iteration scale (0.1 = desk scale).
    pub iter_scale: f64,
    /// Percentage of surfels selected as high-error.
    pub k_percent: f64,
    /// Normal-consistency weight in Stages 1 and 3.
    pub beta_nc: f64,
    /// Depth-distortion weight in every stage (0 disables the term).
    pub alpha_dd: f64,
    pub ssim_lambda: f64,
    pub max_sh_degree: usize,
    /// Full-scale SH schedule; also multiplied by `iter_scale`.
    pub sh_raise_interval: usize,
    pub adam: AdamParams,
    pub lrs: LearningRates,
    pub densify: DensifyConfig,
    pub eval: EvalConfig,
    /// Stage 3 starts by cloning the HEGs (ablation: off).
    pub enable_clone: bool,
    /// Stage 3 freezes opacity (ablation: off).
    pub enable_fo: bool,
    /// Stage 3 resumes normal consistency (ablation: off).
    pub enable_rnc: bool,
    /// Stage-3 ablation: train only the clones.
    pub clones_only_stage3: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: [30_000, 10_000, 20_000],
            iter_scale: 0.1,
            k_percent: 1.0,
            beta_nc: 0.05,
            alpha_dd: 0.0,
            ssim_lambda: 0.2,
            max_sh_degree: 3,
            sh_raise_interval: 1000,
            adam: AdamParams::default(),
            lrs: LearningRates::default(),
            densify: DensifyConfig::default(),
            eval: EvalConfig::default(),
            enable_clone: true,
            enable_fo: true,
            enable_rnc: true,
            clones_only_stage3: false,
        }
    }
}

impl PipelineConfig {
    /// Stage lengths after scaling.
    pub fn stage_iterations(&self) -> [usize; 3] {
        self.iterations.map(|n| (n as f64 * self.iter_scale).round() as usize)
    }

    /// SH raise interval after scaling (at least 1).
    pub fn scaled_sh_interval(&self) -> usize {
        ((self.sh_raise_interval as f64 * self.iter_scale).round() as usize).max(1)
    }
}

/// One stage's on-disk outputs.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub report: MetricsReport,
    pub log: StageLog,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub stages: Vec<StageArtifacts>,
    pub partition: Partition,
    /// `(parent, clone)` id pairs from Stage 3's cloning step.
    pub clone_pairs: Vec<(u64, u64)>,
    pub final_set: SurfelSet,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(DataError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(DataError::io(path))
}

fn atomic_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| DataError::Json { path: path.into(), source })?;
    Ok(atomic_write(path, text.as_bytes())?)
}

fn atomic_checkpoint(
    set: &SurfelSet,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    checkpoint_write(set, meta, &tmp)?;
    Ok(std::fs::rename(&tmp, path).map_err(DataError::io(path))?)
}

/// Renders every view, fuses a TSDF mesh from the median depth and reports
/// image and geometry metrics against the scene's ground truth.
///
/// A model too weak to produce any surface reports infinite Chamfer
/// distance and zero F-score rather than failing the run.
pub fn evaluate_model(
    set: &SurfelSet,
    scene: &SceneBundle,
    eval: &EvalConfig,
    stage_id: u32,
) -> Result<MetricsReport, TrainError> {
    let gt_mesh = scene
        .gt_mesh
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("scene has no ground-truth mesh".into()))?;
    let opts = RenderOptions { retain_contributions: false, ..Default::default() };
    let voxel = if eval.voxel_size > 0.0 { eval.voxel_size } else { scene.extent / 24.0 };
    let reach = scene.extent + 3.0 * voxel;
    // Slightly asymmetric bounds keep lattice points off exact surface
    // planes of the synthetic scenes.
    let min = Vector3::new(
        -reach + 0.137 * voxel,
        -reach + 0.211 * voxel,
        -reach + 0.059 * voxel,
    );
    let mut volume = TsdfVolume::from_bounds(min, Vector3::new(reach, reach, reach), voxel);
    let trunc = volume.default_trunc();

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (camera, gt) in scene.cameras.iter().zip(&scene.gt_images) {
        let out = render(set, camera, &opts)?;
        psnr_sum += psnr(&out.color, gt)?;
        ssim_sum += ssim(&out.color, gt)?;
        tsdf_integrate(&mut volume, &out.depth_median, &out.accum, camera, trunc)?;
    }
    let n_views = scene.cameras.len() as f64;

    let extracted = marching_cubes(&volume, 0.0);
    let (chamfer, fscore) = if extracted.is_empty() {
        (f64::INFINITY, 0.0)
    } else {
        let r = chamfer_and_fscore(
            &extracted,
            gt_mesh,
            eval.tau,
            eval.mesh_samples,
            eval.sample_seed,
        )?;
        (r.chamfer, r.fscore)
    };
    let stats = attribute_stats(set)?;
    Ok(MetricsReport {
        psnr: psnr_sum / n_views,
        ssim: ssim_sum / n_views,
        chamfer,
        fscore,
        tau: eval.tau,
        voxel_size: voxel,
        n_surfels: set.len(),
        mean_ka: stats.mean_ka,
        mean_alpha: stats.mean_alpha,
        stage_id,
    })
}

/// Runs Stage 1 -> scoring -> Stage 2 -> cloning -> Stage 3, writing a
/// checkpoint and a metrics report after each stage plus the resolved
/// config, the HEG selection and the clone map. On error, a `failure.json`
/// marker is left in `out_dir` and completed artifacts are kept.
pub fn run_pipeline(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineArtifacts, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(DataError::io(out_dir))?;
    match run_pipeline_inner(scene, cfg, out_dir) {
        Ok(artifacts) => Ok(artifacts),
        Err(e) => {
            let marker = serde_json::json!({ "failed": true, "error": e.to_string() });
            let _ = atomic_json(&out_dir.join("failure.json"), &marker);
            Err(e)
        }
    }
}

fn run_pipeline_inner(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineArtifacts, TrainError> {
    atomic_json(&out_dir.join("config.json"), cfg)?;
    let mut set = scene.initial_surfels(cfg.max_sh_degree, cfg.seed);
    let mut optim = OptimState::new(cfg.adam, cfg.max_sh_degree);
    let mut global_step = 0usize;
    let mut stages = Vec::with_capacity(3);

    let (artifacts, partition) =
        pipeline_stage1(scene, cfg, out_dir, &mut set, &mut optim, &mut global_step)?;
    stages.push(artifacts);
    stages.push(pipeline_stage2(scene, cfg, out_dir, &mut set, &mut optim, &mut global_step)?);
    let (artifacts, clone_pairs) =
        pipeline_stage3(scene, cfg, out_dir, &mut set, &mut optim, &mut global_step)?;
    stages.push(artifacts);

    Ok(PipelineArtifacts { stages, partition, clone_pairs, final_set: set })
}

/// Runs one stage's training loop with the pipeline-level settings.
#[allow(clippy::too_many_arguments)]
fn stage_loop(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    stage: u32,
    set: &mut SurfelSet,
    optim: &mut OptimState,
    global_step: &mut usize,
    policy: FreezePolicy,
    weights: LossWeights,
    densify: Option<DensifyConfig>,
) -> Result<StageLog, TrainError> {
    let iters = cfg.stage_iterations();
    let loop_cfg = LoopConfig {
        plan: StagePlan { stage, iterations: iters[stage as usize - 1], weights, densify },
        policy,
        lrs: cfg.lrs,
        render: RenderOptions::default(),
        seed: cfg.seed,
        sh_raise_interval: cfg.scaled_sh_interval(),
        mu_decay_horizon: iters[0],
        scene_extent: scene.extent,
    };
    train_stage(set, optim, &scene.cameras, &scene.gt_images, &loop_cfg, global_step)
}

/// Writes the stage checkpoint and metrics report.
fn finish_stage(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
    stage: u32,
    set: &SurfelSet,
    global_step: usize,
    log: StageLog,
) -> Result<StageArtifacts, TrainError> {
    let checkpoint = out_dir.join(format!("stage{stage}.ckpt"));
    let meta = CheckpointMeta { stage, iteration: global_step as u64, seed: cfg.seed };
    atomic_checkpoint(set, &meta, &checkpoint)?;
    let report = evaluate_model(set, scene, &cfg.eval, stage)?;
    let metrics_path = out_dir.join(format!("metrics_stage{stage}.json"));
    atomic_json(&metrics_path, &report)?;
    Ok(StageArtifacts { checkpoint, metrics_path, report, log })
}

/// Stage 1 on a freshly initialized `set`: everything trainable, normal
/// consistency on, densification on. Afterwards every surfel is scored
/// against all views and the top-K are marked high-error, so the stage-1
/// checkpoint already carries the HEG flags; the ranked ids also land in
/// `hegs.json`.
pub fn pipeline_stage1(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
    set: &mut SurfelSet,
    optim: &mut OptimState,
    global_step: &mut usize,
) -> Result<(StageArtifacts, Partition), TrainError> {
    let weights = LossWeights {
        depth_distortion: cfg.alpha_dd,
        normal_consistency: cfg.beta_nc,
        ssim_lambda: cfg.ssim_lambda,
    };
    let log = stage_loop(
        scene,
        cfg,
        1,
        set,
        optim,
        global_step,
        FreezePolicy::AllTrainable,
        weights,
        Some(cfg.densify),
    )?;
    let scores =
        compute_error_scores(set, &scene.cameras, &scene.gt_images, &RenderOptions::default())?;
    let partition = select_hegs(&scores, cfg.k_percent)?;
    mark_hegs(set, &partition);
    atomic_json(
        &out_dir.join("hegs.json"),
        &serde_json::json!({ "k_percent": cfg.k_percent, "heg_ids": partition.heg_ids }),
    )?;
    let artifacts = finish_stage(scene, cfg, out_dir, 1, set, *global_step, log)?;
    Ok((artifacts, partition))
}

/// Stage 2 on a set whose high-error flags are already marked (e.g. read
/// back from the stage-1 checkpoint): SH-only fine-tuning of the HEGs,
/// normal consistency off, no densification.
pub fn pipeline_stage2(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
    set: &mut SurfelSet,
    optim: &mut OptimState,
    global_step: &mut usize,
) -> Result<StageArtifacts, TrainError> {
    let weights = LossWeights {
        depth_distortion: cfg.alpha_dd,
        normal_consistency: 0.0,
        ssim_lambda: cfg.ssim_lambda,
    };
    let log = stage_loop(
        scene,
        cfg,
        2,
        set,
        optim,
        global_step,
        FreezePolicy::HegShOnly,
        weights,
        None,
    )?;
    finish_stage(scene, cfg, out_dir, 2, set, *global_step, log)
}

/// Stage 3: clones every flagged high-error surfel in place (unless
/// ablated), then trains with opacity frozen and normal consistency
/// resumed (each unless ablated). Returns the `(parent, clone)` id pairs,
/// which are also written to `clones.json`.
pub fn pipeline_stage3(
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    out_dir: &Path,
    set: &mut SurfelSet,
    optim: &mut OptimState,
    global_step: &mut usize,
) -> Result<(StageArtifacts, Vec<(u64, u64)>), TrainError> {
    let clone_pairs = if cfg.enable_clone {
        let heg_ids: Vec<u64> =
            set.surfels.iter().filter(|s| s.heg).map(|s| s.id).collect();
        clone_in_place(set, &heg_ids)?
    } else {
        Vec::new()
    };
    atomic_json(
        &out_dir.join("clones.json"),
        &serde_json::json!({
            "enabled": cfg.enable_clone,
            "pairs": clone_pairs
                .iter()
                .map(|(p, c)| serde_json::json!({ "parent": p, "clone": c }))
                .collect::<Vec<_>>(),
        }),
    )?;
    let policy = if cfg.clones_only_stage3 {
        FreezePolicy::ClonesOnly { freeze_opacity: cfg.enable_fo }
    } else if cfg.enable_fo {
        FreezePolicy::OpacityFrozen
    } else {
        FreezePolicy::AllTrainable
    };
    let weights = LossWeights {
        depth_distortion: cfg.alpha_dd,
        normal_consistency: if cfg.enable_rnc { cfg.beta_nc } else { 0.0 },
        ssim_lambda: cfg.ssim_lambda,
    };
    let log =
        stage_loop(scene, cfg, 3, set, optim, global_step, policy, weights, None)?;
    let artifacts = finish_stage(scene, cfg, out_dir, 3, set, *global_step, log)?;
    Ok((artifacts, clone_pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use surfelsplat_data::checkpoint::checkpoint_read;
    use surfelsplat_data::scene::{make_scene, SceneKind, SceneParams};

    fn quick_scene() -> SceneBundle {
        let params = SceneParams {
            kind: SceneKind::TexturedPlane,
            n_cameras: 3,
            width: 24,
            height: 24,
            n_seed_points: 60,
            ..Default::default()
        };
        make_scene(&params, 4).unwrap()
    }

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            seed: 11,
            iterations: [8, 4, 6],
            iter_scale: 1.0,
            sh_raise_interval: 5,
            max_sh_degree: 2,
            eval: EvalConfig {
                voxel_size: 0.15,
                tau: 0.1,
                mesh_samples: 400,
                sample_seed: 17,
            },
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_runs_produce_bit_identical_checkpoints() {
        let scene = quick_scene();
        let cfg = quick_config();
        let dir = tempfile::tempdir().unwrap();
        let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
        run_pipeline(&scene, &cfg, &out_a).unwrap();
        run_pipeline(&scene, &cfg, &out_b).unwrap();
        for stage in 1..=3 {
            let name = format!("stage{stage}.ckpt");
            let a = std::fs::read(out_a.join(&name)).unwrap();
            let b = std::fs::read(out_b.join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        assert!(!out_a.join("failure.json").exists());
    }

    #[test]
    fn zero_iterations_keep_parameters_and_append_clones() {
        let scene = quick_scene();
        let mut cfg = quick_config();
        cfg.iterations = [0, 0, 0];
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_pipeline(&scene, &cfg, dir.path()).unwrap();

        let (s1, _) = checkpoint_read(dir.path().join("stage1.ckpt")).unwrap();
        let (s2, _) = checkpoint_read(dir.path().join("stage2.ckpt")).unwrap();
        let (s3, meta3) = checkpoint_read(dir.path().join("stage3.ckpt")).unwrap();
        assert_eq!(meta3.stage, 3);
        assert_eq!(s1.len(), 60);
        // No training happened, so parameters are carried through verbatim.
        for (a, b) in s1.surfels.iter().zip(&s2.surfels) {
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.sh, b.sh);
            assert_eq!(a.raw_opacity, b.raw_opacity);
        }
        let n_hegs = artifacts.partition.heg_ids.len();
        assert_eq!(n_hegs, 1, "K=1% of 60 surfels");
        assert_eq!(s3.len(), s2.len() + n_hegs);
        // Clones equal their parents.
        let idx = s3.id_to_index();
        for (parent, clone) in &artifacts.clone_pairs {
            let p = &s3.surfels[idx[parent]];
            let c = &s3.surfels[idx[clone]];
            assert!(c.is_clone);
            assert_eq!(p.mu, c.mu);
            assert_eq!(p.sh, c.sh);
        }
    }

    #[test]
    fn failures_leave_a_marker_and_keep_finished_stages() {
        // A scene without a reference mesh breaks the stage-1 evaluation,
        // which runs after the stage-1 checkpoint is already on disk.
        let mut scene = quick_scene();
        scene.gt_mesh = None;
        let cfg = quick_config();
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&scene, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)), "{err}");
        assert!(dir.path().join("stage1.ckpt").exists(), "completed artifact is retained");
        assert!(dir.path().join("hegs.json").exists());
        assert!(!dir.path().join("metrics_stage1.json").exists());
        assert!(!dir.path().join("stage2.ckpt").exists());
        let marker: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("failure.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(marker["failed"], serde_json::Value::Bool(true));
        assert!(marker["error"].as_str().unwrap().contains("ground-truth mesh"));
    }

    #[test]
    fn metrics_reports_parse_back_and_describe_each_stage() {
        let scene = quick_scene();
        let cfg = quick_config();
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_pipeline(&scene, &cfg, dir.path()).unwrap();
        for (i, stage) in artifacts.stages.iter().enumerate() {
            let text = std::fs::read_to_string(&stage.metrics_path).unwrap();
            let report: MetricsReport = serde_json::from_str(&text).unwrap();
            assert_eq!(report.stage_id as usize, i + 1);
            assert_eq!(report.tau, 0.1);
            assert_eq!(report.n_surfels, stage.report.n_surfels);
            assert!(report.ssim.is_finite());
            assert!(report.mean_alpha > 0.0 && report.mean_alpha < 1.0);
        }
        // The resolved config echo parses back to the input.
        let echoed: PipelineConfig = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("config.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(echoed, cfg);
        // The clone map matches stage 3's surfel growth.
        let n2 = artifacts.stages[1].report.n_surfels;
        let n3 = artifacts.stages[2].report.n_surfels;
        assert_eq!(n3 - n2, artifacts.clone_pairs.len());
    }

    #[test]
    fn ablation_flags_change_stage3_behavior() {
        let scene = quick_scene();
        let mut cfg = quick_config();
        cfg.enable_clone = false;
        cfg.enable_fo = false;
        cfg.enable_rnc = false;
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_pipeline(&scene, &cfg, dir.path()).unwrap();
        assert!(artifacts.clone_pairs.is_empty());
        let n2 = artifacts.stages[1].report.n_surfels;
        let n3 = artifacts.stages[2].report.n_surfels;
        assert_eq!(n2, n3, "no cloning means no growth");
        // With FO off, some opacity must have moved in stage 3.
        let (s2, _) = checkpoint_read(&artifacts.stages[1].checkpoint).unwrap();
        let (s3, _) = checkpoint_read(&artifacts.stages[2].checkpoint).unwrap();
        assert!(
            s2.surfels.iter().zip(&s3.surfels).any(|(a, b)| a.raw_opacity != b.raw_opacity),
            "unfrozen opacity should train"
        );
    }
}
