//! The per-stage training loop.
//!
//! One loop serves all three stages; they differ only in loss weights,
//! freeze policy and whether adaptive density control runs. Each iteration
//! renders one (seeded-random) training view, evaluates the loss, aborts on
//! a non-finite value, backpropagates and applies one Adam step. The SH
//! degree rises by one every fixed number of global steps until the set's
//! maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surfelsplat_core::losses::{total_loss, LossBreakdown, LossWeights};
use surfelsplat_core::raster::render;
use surfelsplat_core::{backward, Camera, FreezeMask, Image3, RenderOptions, SurfelSet};

use crate::densify::{densify_and_prune, reset_opacity, DensifyConfig, DensifyStats};
use crate::optim::{LearningRates, OptimState};
use crate::TrainError;

/// What one stage runs: its id, length, loss weights and (for Stage 1) the
/// densification schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u32,
    pub iterations: usize,
    pub weights: LossWeights,
    pub densify: Option<DensifyConfig>,
}

/// Which parameter classes each stage may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Stage 1: everything trainable.
    AllTrainable,
    /// Stage 2: low-error surfels fully frozen; high-error surfels may only
    /// move their SH coefficients. Reads the `heg` flags.
    HegShOnly,
    /// Stage 3: opacity frozen for every surfel, the rest trainable.
    OpacityFrozen,
    /// Stage-3 ablation: only clones train; optionally their opacity stays
    /// frozen too.
    ClonesOnly { freeze_opacity: bool },
}

/// Materializes a policy against the current set.
pub fn build_freeze(set: &SurfelSet, policy: FreezePolicy) -> FreezeMask {
    let n = set.len();
    match policy {
        FreezePolicy::AllTrainable => FreezeMask::none(n),
        FreezePolicy::HegShOnly => {
            let mut mask = FreezeMask::none(n);
            for (i, s) in set.surfels.iter().enumerate() {
                if s.heg {
                    mask.mu[i] = true;
                    mask.quat[i] = true;
                    mask.log_scale[i] = true;
                    mask.raw_opacity[i] = true;
                } else {
                    mask.freeze_all_of(i);
                }
            }
            mask
        }
        FreezePolicy::OpacityFrozen => {
            let mut mask = FreezeMask::none(n);
            mask.raw_opacity = vec![true; n];
            mask
        }
        FreezePolicy::ClonesOnly { freeze_opacity } => {
            let mut mask = FreezeMask::none(n);
            for (i, s) in set.surfels.iter().enumerate() {
                if !s.is_clone {
                    mask.freeze_all_of(i);
                } else if freeze_opacity {
                    mask.raw_opacity[i] = true;
                }
            }
            mask
        }
    }
}

/// Everything a stage run needs beyond the surfels and the scene.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub plan: StagePlan,
    pub policy: FreezePolicy,
    pub lrs: LearningRates,
    pub render: RenderOptions,
    pub seed: u64,
    /// Raise the SH degree every this many global steps (0 disables).
    pub sh_raise_interval: usize,
    /// Length of the center-rate decay window (the Stage-1 length).
    pub mu_decay_horizon: usize,
    /// Bounding radius of the scene, for the clone/split size gate.
    pub scene_extent: f64,
}

/// Summary of one stage run.
#[derive(Debug, Clone, Default)]
pub struct StageLog {
    pub iterations_run: usize,
    pub final_loss: Option<LossBreakdown>,
    /// `(iteration, stats)` per densification event.
    pub densify_events: Vec<(usize, DensifyStats)>,
}

/// Runs one stage in place. `global_step` persists across stages so the SH
/// schedule continues rather than restarting.
pub fn train_stage(
    set: &mut SurfelSet,
    optim: &mut OptimState,
    cameras: &[Camera],
    gt_images: &[Image3],
    cfg: &LoopConfig,
    global_step: &mut usize,
) -> Result<StageLog, TrainError> {
    if cameras.is_empty() || cameras.len() != gt_images.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} cameras with {} ground-truth images",
            cameras.len(),
            gt_images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed.wrapping_add((cfg.plan.stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
    );
    let mut log = StageLog::default();
    let mut freeze = build_freeze(set, cfg.policy);
    let mut grad_acc = vec![0.0; set.len()];
    let mut seen_acc = vec![0u32; set.len()];
    let densify_end = cfg.plan.densify.as_ref().map_or(0, |d| d.end(cfg.plan.iterations));

    for it in 1..=cfg.plan.iterations {
        let view = rng.random_range(0..cameras.len());
        let camera = &cameras[view];
        let outputs = render(set, camera, &cfg.render)?;
        let (breakdown, lgrads) =
            total_loss(set, camera, &outputs, &gt_images[view], &cfg.plan.weights)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                stage: cfg.plan.stage,
                iteration: it,
                loss: breakdown.total,
            });
        }
        let grads = backward(set, camera, &outputs, &lgrads, &cfg.render, &freeze)?;
        let decay_step = if cfg.plan.stage == 1 { it } else { cfg.mu_decay_horizon };
        let rates = cfg.lrs.at(decay_step, cfg.mu_decay_horizon);
        optim.step(set, &grads, &freeze, &rates);
        *global_step += 1;
        log.final_loss = Some(breakdown);
        log.iterations_run = it;

        if cfg.sh_raise_interval > 0
            && *global_step % cfg.sh_raise_interval == 0
            && set.active_sh_degree < set.max_sh_degree
        {
            set.active_sh_degree += 1;
        }

        if let Some(dc) = &cfg.plan.densify {
            for i in 0..set.len() {
                grad_acc[i] += grads.screen_grad[i];
                seen_acc[i] += grads.seen[i];
            }
            if it >= dc.start && it <= densify_end && it % dc.interval == 0 {
                let stats =
                    densify_and_prune(set, optim, &grad_acc, &seen_acc, cfg.scene_extent, dc);
                log.densify_events.push((it, stats));
                grad_acc = vec![0.0; set.len()];
                seen_acc = vec![0; set.len()];
                freeze = build_freeze(set, cfg.policy);
            }
            if dc.reset_interval > 0 && it <= densify_end && it % dc.reset_interval == 0 {
                reset_opacity(set, optim, dc.reset_alpha);
            }
        }
    }
    Ok(log)
}

/// Mean PSNR of the model against every view (training-view fit).
pub fn mean_psnr(
    set: &SurfelSet,
    cameras: &[Camera],
    gt_images: &[Image3],
    render_opts: &RenderOptions,
) -> Result<f64, TrainError> {
    let opts = RenderOptions { retain_contributions: false, ..render_opts.clone() };
    let mut total = 0.0;
    for (camera, gt) in cameras.iter().zip(gt_images) {
        let out = render(set, camera, &opts)?;
        total += surfelsplat_geom::psnr(&out.color, gt)?;
    }
    Ok(total / cameras.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamParams;
    use nalgebra::Vector3;
    use std::hash::{DefaultHasher, Hash, Hasher};
    use surfelsplat_core::Surfel;

    /// A small two-view scene: ground truth is rendered from a "target" set
    /// so the loss has real signal, and training starts from a perturbed
    /// copy.
    fn tiny_scene() -> (Vec<Camera>, Vec<Image3>, SurfelSet) {
        let cameras: Vec<Camera> = (0..2)
            .map(|i| {
                let theta = 0.4 + i as f64 * 0.9;
                let eye = 2.5 * Vector3::new(theta.cos(), theta.sin(), 0.7);
                Camera::look_at(
                    eye,
                    Vector3::zeros(),
                    Vector3::new(0.0, 0.0, 1.0),
                    12,
                    12,
                    11.0,
                    11.0,
                )
                .unwrap()
            })
            .collect();
        let mut target = SurfelSet::new(1);
        let mut init = SurfelSet::new(1);
        for gy in 0..3 {
            for gx in 0..3 {
                let mu = Vector3::new(gx as f64 * 0.4 - 0.4, gy as f64 * 0.4 - 0.4, 0.0);
                let dc = [
                    0.2 + 0.2 * gx as f64,
                    0.8 - 0.2 * gy as f64,
                    0.3 * ((gx + gy) % 2) as f64,
                ];
                let base = Surfel {
                    mu,
                    quat: [1.0, 0.15, -0.1, 0.05],
                    log_scale: [-1.1, -1.0],
                    raw_opacity: 1.2,
                    sh: vec![dc, [0.0; 3], [0.0; 3], [0.0; 3]],
                    id: 0,
                    heg: false,
                    is_clone: false,
                };
                target.push(base.clone());
                let mut off = base;
                off.mu += Vector3::new(0.03, -0.02, 0.05);
                off.sh[0] = [dc[0] - 0.15, dc[1] + 0.1, dc[2] + 0.1];
                init.push(off);
            }
        }
        let opts = RenderOptions { retain_contributions: false, ..Default::default() };
        let gts = cameras.iter().map(|c| render(&target, c, &opts).unwrap().color).collect();
        (cameras, gts, init)
    }

    fn loop_config(stage: u32, iterations: usize, policy: FreezePolicy) -> LoopConfig {
        LoopConfig {
            plan: StagePlan {
                stage,
                iterations,
                weights: LossWeights {
                    depth_distortion: 0.0,
                    normal_consistency: if stage == 2 { 0.0 } else { 0.05 },
                    ssim_lambda: 0.2,
                },
                densify: None,
            },
            policy,
            lrs: LearningRates::default(),
            render: RenderOptions::default(),
            seed: 7,
            sh_raise_interval: 0,
            mu_decay_horizon: 100,
            scene_extent: 1.0,
        }
    }

    fn hash_frozen(set: &SurfelSet, mask: &FreezeMask) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, s) in set.surfels.iter().enumerate() {
            if mask.mu[i] {
                for k in 0..3 {
                    s.mu[k].to_bits().hash(&mut h);
                }
            }
            if mask.quat[i] {
                for q in s.quat {
                    q.to_bits().hash(&mut h);
                }
            }
            if mask.log_scale[i] {
                for l in s.log_scale {
                    l.to_bits().hash(&mut h);
                }
            }
            if mask.raw_opacity[i] {
                s.raw_opacity.to_bits().hash(&mut h);
            }
            if mask.sh[i] {
                for coeff in &s.sh {
                    for c in coeff {
                        c.to_bits().hash(&mut h);
                    }
                }
            }
        }
        h.finish()
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let (cameras, gts, mut set) = tiny_scene();
        let before = set.clone();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        let log = train_stage(
            &mut set,
            &mut opt,
            &cameras,
            &gts,
            &loop_config(1, 0, FreezePolicy::AllTrainable),
            &mut step,
        )
        .unwrap();
        assert_eq!(log.iterations_run, 0);
        assert!(log.final_loss.is_none());
        assert_eq!(set, before);
        assert_eq!(step, 0);
    }

    #[test]
    fn training_reduces_the_loss_on_the_tiny_scene() {
        let (cameras, gts, mut set) = tiny_scene();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        let cfg = loop_config(1, 1, FreezePolicy::AllTrainable);
        let first = train_stage(&mut set, &mut opt, &cameras, &gts, &cfg, &mut step)
            .unwrap()
            .final_loss
            .unwrap();
        let mut cfg_more = loop_config(1, 120, FreezePolicy::AllTrainable);
        cfg_more.seed = 8;
        let last = train_stage(&mut set, &mut opt, &cameras, &gts, &cfg_more, &mut step)
            .unwrap()
            .final_loss
            .unwrap();
        assert!(
            last.total < first.total,
            "loss should fall: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn stage2_moves_only_heg_sh_and_keeps_geometry_maps_bit_identical() {
        let (cameras, gts, mut set) = tiny_scene();
        set.surfels[4].heg = true;
        let before = set.clone();
        let opts = RenderOptions::default();
        let maps_before = render(&set, &cameras[0], &opts).unwrap();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        train_stage(
            &mut set,
            &mut opt,
            &cameras,
            &gts,
            &loop_config(2, 25, FreezePolicy::HegShOnly),
            &mut step,
        )
        .unwrap();
        for (i, (a, b)) in before.surfels.iter().zip(&set.surfels).enumerate() {
            assert_eq!(a.mu, b.mu, "surfel {i} center");
            assert_eq!(a.quat, b.quat);
            assert_eq!(a.log_scale, b.log_scale);
            assert_eq!(a.raw_opacity, b.raw_opacity);
            if i == 4 {
                assert_ne!(a.sh, b.sh, "the HEG's color must have trained");
            } else {
                assert_eq!(a.sh, b.sh, "surfel {i} is a LEG");
            }
        }
        let maps_after = render(&set, &cameras[0], &opts).unwrap();
        assert_eq!(maps_before.depth_mean, maps_after.depth_mean);
        assert_eq!(maps_before.depth_median, maps_after.depth_median);
        assert_eq!(maps_before.accum, maps_after.accum);
    }

    #[test]
    fn stage3_policy_freezes_every_opacity() {
        let (cameras, gts, mut set) = tiny_scene();
        let before = set.clone();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        train_stage(
            &mut set,
            &mut opt,
            &cameras,
            &gts,
            &loop_config(3, 25, FreezePolicy::OpacityFrozen),
            &mut step,
        )
        .unwrap();
        for (a, b) in before.surfels.iter().zip(&set.surfels) {
            assert_eq!(a.raw_opacity, b.raw_opacity);
        }
        assert!(before.surfels.iter().zip(&set.surfels).any(|(a, b)| a.mu != b.mu));
    }

    #[test]
    fn clones_only_policy_pins_the_originals() {
        let (cameras, gts, mut set) = tiny_scene();
        set.surfels[2].is_clone = true;
        let before = set.clone();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        train_stage(
            &mut set,
            &mut opt,
            &cameras,
            &gts,
            &loop_config(3, 20, FreezePolicy::ClonesOnly { freeze_opacity: true }),
            &mut step,
        )
        .unwrap();
        for (i, (a, b)) in before.surfels.iter().zip(&set.surfels).enumerate() {
            if i == 2 {
                assert_ne!(a.sh, b.sh, "the clone must train");
                assert_eq!(a.raw_opacity, b.raw_opacity, "clone opacity stays frozen");
            } else {
                assert_eq!(a, b, "original {i} must be untouched");
            }
        }
    }

    #[test]
    fn frozen_blocks_hash_identically_after_any_stage() {
        for policy in [
            FreezePolicy::AllTrainable,
            FreezePolicy::HegShOnly,
            FreezePolicy::OpacityFrozen,
            FreezePolicy::ClonesOnly { freeze_opacity: false },
        ] {
            let (cameras, gts, mut set) = tiny_scene();
            set.surfels[1].heg = true;
            set.surfels[7].is_clone = true;
            let mask = build_freeze(&set, policy);
            let before = hash_frozen(&set, &mask);
            let mut opt = OptimState::new(AdamParams::default(), 1);
            let mut step = 0;
            train_stage(&mut set, &mut opt, &cameras, &gts, &loop_config(1, 15, policy), &mut step)
                .unwrap();
            assert_eq!(before, hash_frozen(&set, &mask), "policy {policy:?}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diverged_error() {
        let (cameras, mut gts, mut set) = tiny_scene();
        gts[0].set(5, 5, [f64::NAN, 0.0, 0.0]);
        gts[1].set(5, 5, [f64::NAN, 0.0, 0.0]);
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        let err = train_stage(
            &mut set,
            &mut opt,
            &cameras,
            &gts,
            &loop_config(1, 10, FreezePolicy::AllTrainable),
            &mut step,
        )
        .unwrap_err();
        match err {
            TrainError::Diverged { stage: 1, iteration, loss } => {
                assert!(iteration >= 1);
                assert!(loss.is_nan());
            }
            other => panic!("expected a divergence error, got {other}"),
        }
    }

    #[test]
    fn sh_degree_follows_the_global_step_schedule() {
        let (cameras, gts, mut set) = tiny_scene();
        assert_eq!(set.active_sh_degree, 0);
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        let mut cfg = loop_config(1, 3, FreezePolicy::AllTrainable);
        cfg.sh_raise_interval = 4;
        train_stage(&mut set, &mut opt, &cameras, &gts, &cfg, &mut step).unwrap();
        assert_eq!(set.active_sh_degree, 0, "three steps have not hit the interval yet");
        cfg.plan.stage = 2;
        cfg.plan.iterations = 2;
        train_stage(&mut set, &mut opt, &cameras, &gts, &cfg, &mut step).unwrap();
        assert_eq!(step, 5);
        assert_eq!(set.active_sh_degree, 1, "the schedule spans stage boundaries");
        cfg.plan.iterations = 40;
        train_stage(&mut set, &mut opt, &cameras, &gts, &cfg, &mut step).unwrap();
        assert_eq!(set.active_sh_degree, 1, "degree is capped by the set maximum");
    }

    #[test]
    fn densification_runs_only_inside_its_window() {
        let (cameras, gts, mut set) = tiny_scene();
        let mut opt = OptimState::new(AdamParams::default(), 1);
        let mut step = 0;
        let mut cfg = loop_config(1, 20, FreezePolicy::AllTrainable);
        cfg.plan.densify = Some(DensifyConfig {
            interval: 5,
            start: 5,
            end_fraction: 0.5,
            grad_threshold: f64::INFINITY, // decisions stay no-ops
            reset_interval: 0,
            ..Default::default()
        });
        let log =
            train_stage(&mut set, &mut opt, &cameras, &gts, &cfg, &mut step).unwrap();
        let at: Vec<usize> = log.densify_events.iter().map(|(it, _)| *it).collect();
        assert_eq!(at, vec![5, 10], "events at multiples of the interval inside [start, 60%]");
    }
}
