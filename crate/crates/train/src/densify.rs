//! Adaptive density control for Stage-1 training.
//!
//! Surfels whose accumulated screen-space positional gradient is large are
//! either cloned (small surfels, under-reconstruction) or split in two
//! (large surfels, over-reconstruction); nearly transparent surfels are
//! pruned, and opacity is periodically reset to a small value so pruning
//! can reconsider every surfel.

use serde::{Deserialize, Serialize};

use surfelsplat_core::math::rotation_from_raw;
use surfelsplat_core::SurfelSet;

use crate::optim::OptimState;

/// Densification schedule and thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Steps between densification events.
    pub interval: usize,
    /// First step at which densification may run.
    pub start: usize,
    /// Densification stops after this fraction of the stage length.
    pub end_fraction: f64,
    /// Mean screen-space gradient (pixels) above which a surfel is refined.
    pub grad_threshold: f64,
    /// Refined surfels smaller than this fraction of the scene extent are
    /// cloned; larger ones are split.
    pub clone_scale_fraction: f64,
    /// Scale divisor for split children.
    pub split_factor: f64,
    /// Prune surfels whose opacity falls below this.
    pub prune_alpha: f64,
    /// Steps between opacity resets (0 disables them).
    pub reset_interval: usize,
    /// Opacity value applied by a reset.
    pub reset_alpha: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            end_fraction: 0.6,
            grad_threshold: 2e-4,
            clone_scale_fraction: 0.01,
            split_factor: 1.6,
            prune_alpha: 0.05,
            reset_interval: 3000,
            reset_alpha: 0.01,
        }
    }
}

impl DensifyConfig {
    /// Last step (inclusive) at which densification may run in a stage of
    /// `stage_len` steps.
    pub fn end(&self, stage_len: usize) -> usize {
        (stage_len as f64 * self.end_fraction).floor() as usize
    }
}

/// What one densification event did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// One clone/split/prune pass.
///
/// `grad_sum[i]` and `seen[i]` accumulate `ParamGrads::screen_grad` and
/// `ParamGrads::seen` over the steps since the previous event; the decision
/// statistic is their ratio. Children inherit every parameter; split
/// children shrink by `split_factor` and move `±0.5` parent standard
/// deviations along the parent's dominant tangent axis (a deterministic
/// stand-in for resampling). The parent of a split is removed.
pub fn densify_and_prune(
    set: &mut SurfelSet,
    optim: &mut OptimState,
    grad_sum: &[f64],
    seen: &[u32],
    scene_extent: f64,
    cfg: &DensifyConfig,
) -> DensifyStats {
    let mut stats = DensifyStats::default();
    let n = set.len();
    let mut split_parents: Vec<usize> = Vec::new();
    for i in 0..n {
        if seen[i] == 0 {
            continue;
        }
        let mean_grad = grad_sum[i] / seen[i] as f64;
        if mean_grad <= cfg.grad_threshold {
            continue;
        }
        let (su, sv) = set.surfels[i].scales();
        if su.max(sv) < cfg.clone_scale_fraction * scene_extent {
            let copy = set.surfels[i].clone();
            set.push(copy);
            stats.cloned += 1;
        } else {
            split_parents.push(i);
        }
    }
    for &i in &split_parents {
        let parent = set.surfels[i].clone();
        let rot = rotation_from_raw(&parent.quat);
        let (su, sv) = parent.scales();
        let axis = if su >= sv { rot.column(0).into_owned() } else { rot.column(1).into_owned() };
        let offset = axis * (0.5 * su.max(sv));
        let shrink = cfg.split_factor.ln();
        for dir in [-1.0, 1.0] {
            let mut child = parent.clone();
            child.mu = parent.mu + dir * offset;
            child.log_scale = [parent.log_scale[0] - shrink, parent.log_scale[1] - shrink];
            set.push(child);
        }
        stats.split += 1;
    }
    // Remove split parents and transparent surfels in one retain sweep.
    let split_ids: std::collections::HashSet<u64> =
        split_parents.iter().map(|&i| set.surfels[i].id).collect();
    let before = set.len();
    let prune_alpha = cfg.prune_alpha;
    set.retain(|s| !split_ids.contains(&s.id) && s.opacity() >= prune_alpha);
    stats.pruned = before - set.len() - stats.split;
    optim.retain_ids(set);
    stats
}

/// Lowers every opacity to `alpha` (never raises one) and clears the
/// optimizer's opacity moments.
pub fn reset_opacity(set: &mut SurfelSet, optim: &mut OptimState, alpha: f64) {
    let raw = (alpha / (1.0 - alpha)).ln();
    for s in &mut set.surfels {
        s.raw_opacity = s.raw_opacity.min(raw);
    }
    optim.reset_opacity_moments();
}
