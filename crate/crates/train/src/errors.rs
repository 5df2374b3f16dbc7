//! Per-surfel error scoring, high-error selection and in-place cloning.
//!
//! After Stage 1, each surfel accumulates the photometric error of every
//! pixel its footprint touches in every training view:
//! `E_i = sum_v sum_{p in footprint(i, v)} |C_i^v - C_gt^v(p)|_1`, where
//! `C_i^v` is the surfel's view-dependent color and the L1 norm sums the
//! three channels. The sum is deliberately not normalized by pixel count and
//! carries no alpha weighting, so big blurry surfels over detailed texture
//! score high. The top K percent by score become high-error Gaussians
//! (HEGs); the rest are low-error Gaussians (LEGs).

use surfelsplat_core::raster::footprint_pass;
use surfelsplat_core::{Camera, Image3, RenderOptions, SurfelSet};

use crate::TrainError;

/// Accumulated error per surfel, aligned with set order.
#[derive(Debug, Clone)]
pub struct ErrorScores {
    pub e: Vec<f64>,
    pub ids: Vec<u64>,
}

/// A HEG/LEG split. Both sides carry stable ids; together they cover the
/// whole set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Selection order: descending score, ties by ascending id.
    pub heg_ids: Vec<u64>,
    pub leg_ids: Vec<u64>,
}

/// Scores every surfel against the training views.
pub fn compute_error_scores(
    set: &SurfelSet,
    cameras: &[Camera],
    gt_images: &[Image3],
    opts: &RenderOptions,
) -> Result<ErrorScores, TrainError> {
    if cameras.len() != gt_images.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} cameras but {} ground-truth images",
            cameras.len(),
            gt_images.len()
        )));
    }
    for (camera, img) in cameras.iter().zip(gt_images) {
        if camera.width != img.width || camera.height != img.height {
            return Err(TrainError::InvalidConfig(format!(
                "camera is {}x{} but its image is {}x{}",
                camera.width, camera.height, img.width, img.height
            )));
        }
    }
    let id_to_index = set.id_to_index();
    let mut e = vec![0.0; set.len()];
    for (view, records) in footprint_pass(set, cameras, opts).iter().enumerate() {
        let gt = &gt_images[view];
        for record in records {
            let idx = id_to_index[&record.surfel_id];
            let mut sum = 0.0;
            for &(px, py) in &record.pixels {
                let g = gt.get(px as usize, py as usize);
                for c in 0..3 {
                    sum += (record.color[c] - g[c]).abs();
                }
            }
            e[idx] += sum;
        }
    }
    Ok(ErrorScores { e, ids: set.surfels.iter().map(|s| s.id).collect() })
}

/// Splits the scored set into the top `k_percent` HEGs and the remaining
/// LEGs. The HEG count is `max(1, ceil(N * K / 100))`.
pub fn select_hegs(scores: &ErrorScores, k_percent: f64) -> Result<Partition, TrainError> {
    if scores.e.is_empty() {
        return Err(TrainError::EmptySet);
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(TrainError::InvalidConfig(format!(
            "K must be in (0, 100], got {k_percent}"
        )));
    }
    let n = scores.e.len();
    let count = ((n as f64 * k_percent / 100.0).ceil() as usize).max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.e[b].total_cmp(&scores.e[a]).then_with(|| scores.ids[a].cmp(&scores.ids[b]))
    });
    Ok(Partition {
        heg_ids: order[..count].iter().map(|&i| scores.ids[i]).collect(),
        leg_ids: order[count..].iter().map(|&i| scores.ids[i]).collect(),
    })
}

/// Records the partition on the surfels' `heg` flags.
pub fn mark_hegs(set: &mut SurfelSet, partition: &Partition) {
    let hegs: std::collections::HashSet<u64> = partition.heg_ids.iter().copied().collect();
    for s in &mut set.surfels {
        s.heg = hegs.contains(&s.id);
    }
}

/// Appends one exact copy of every listed surfel, tagged as a clone.
///
/// Existing surfels and ids are untouched; returns `(parent, clone)` id
/// pairs in set order.
pub fn clone_in_place(
    set: &mut SurfelSet,
    heg_ids: &[u64],
) -> Result<Vec<(u64, u64)>, TrainError> {
    if heg_ids.is_empty() {
        return Err(TrainError::EmptyHegSet);
    }
    let wanted: std::collections::HashSet<u64> = heg_ids.iter().copied().collect();
    let parents: Vec<usize> = (0..set.len())
        .filter(|&i| wanted.contains(&set.surfels[i].id))
        .collect();
    let mut pairs = Vec::with_capacity(parents.len());
    for i in parents {
        let mut clone = set.surfels[i].clone();
        clone.is_clone = true;
        let parent_id = set.surfels[i].id;
        let clone_id = set.push(clone);
        pairs.push((parent_id, clone_id));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use surfelsplat_core::kernel::intersect;
    use surfelsplat_core::raster::render;
    use surfelsplat_core::sh::eval_color;
    use surfelsplat_core::Surfel;

    fn ring_camera(i: usize, n: usize) -> Camera {
        let theta = i as f64 / n as f64 * std::f64::consts::TAU;
        let eye = 3.0 * Vector3::new(theta.cos(), theta.sin(), 0.45);
        Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 16, 16, 14.0, 14.0)
            .unwrap()
    }

    fn random_set(seed: u64, n: usize) -> SurfelSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SurfelSet::new(1);
        set.active_sh_degree = 1;
        for _ in 0..n {
            set.push(Surfel {
                mu: Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6)),
                quat: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                log_scale: [rng.random_range(-1.5..-0.4), rng.random_range(-1.5..-0.4)],
                raw_opacity: rng.random_range(-1.0..2.0),
                sh: (0..4)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3)))
                    .collect(),
                id: 0,
                heg: false,
                is_clone: false,
            });
        }
        set
    }

    fn wavy_image(w: usize, h: usize, phase: f64) -> Image3 {
        Image3::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            [
                0.5 + 0.4 * (7.0 * fx + phase).sin(),
                0.5 + 0.4 * (5.0 * fy - phase).cos(),
                0.5 + 0.3 * (4.0 * (fx + fy)).sin(),
            ]
        })
    }

    #[test]
    fn scores_match_a_triple_loop_oracle() {
        let set = random_set(5, 8);
        let cameras: Vec<Camera> = (0..2).map(|i| ring_camera(i, 2)).collect();
        let gts = [wavy_image(16, 16, 0.3), wavy_image(16, 16, 1.7)];
        let opts = RenderOptions::default();
        let scores = compute_error_scores(&set, &cameras, &gts, &opts).unwrap();

        let kernel = opts.kernel();
        for (i, s) in set.surfels.iter().enumerate() {
            let mut expected = 0.0;
            for (camera, gt) in cameras.iter().zip(&gts) {
                if camera.depth(&s.mu) <= opts.near_clip {
                    continue;
                }
                let dir = (s.mu - camera.center()).normalize();
                let color = eval_color(&s.sh, set.active_sh_degree, &dir);
                // Per-view subtotal, added once, to mirror the summation
                // grouping of the implementation bit for bit.
                let mut view_sum = 0.0;
                for py in 0..16 {
                    for px in 0..16 {
                        if intersect(s, camera, px as f64 + 0.5, py as f64 + 0.5, &kernel)
                            .is_some()
                        {
                            let g = gt.get(px, py);
                            for c in 0..3 {
                                view_sum += (color[c] - g[c]).abs();
                            }
                        }
                    }
                }
                expected += view_sum;
            }
            assert_eq!(scores.e[i], expected, "surfel {i}");
            assert!(scores.e[i] >= 0.0);
        }
    }

    #[test]
    fn invisible_surfels_score_zero() {
        let mut set = random_set(7, 3);
        // Push the surfels far behind every ring camera's image plane.
        for s in &mut set.surfels {
            s.mu = Vector3::new(0.0, 0.0, 50.0);
        }
        let cameras: Vec<Camera> = (0..3).map(|i| ring_camera(i, 3)).collect();
        let gts: Vec<Image3> = (0..3).map(|i| wavy_image(16, 16, i as f64)).collect();
        let scores = compute_error_scores(&set, &cameras, &gts, &RenderOptions::default()).unwrap();
        assert!(scores.e.iter().all(|&e| e == 0.0), "{:?}", scores.e);
    }

    #[test]
    fn four_pixel_footprint_example() {
        // A tiny fronto-parallel surfel whose footprint is exactly the four
        // pixels around the principal point; each differs from ground truth
        // by 0.1 in one channel, so E = 0.4.
        let camera = Camera::new(16, 16, 20.0, 20.0, 8.0, 8.0, Matrix4::identity()).unwrap();
        let dc = 0.1 / surfelsplat_core::sh::C0;
        let mut set = SurfelSet::new(0);
        set.push(Surfel {
            mu: Vector3::new(0.0, 0.0, 5.0),
            quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.1f64.ln(), 0.1f64.ln()],
            raw_opacity: 2.0,
            sh: vec![[dc, 0.0, 0.0]],
            id: 0,
            heg: false,
            is_clone: false,
        });
        let opts = RenderOptions { lowpass_sigma: None, ..Default::default() };
        let gt = Image3::from_fn(16, 16, |_, _| [0.5, 0.5, 0.5]);
        let scores = compute_error_scores(&set, &[camera], &[gt], &opts).unwrap();
        // Color toward the camera is (0.6, 0.5, 0.5).
        assert_relative_eq!(scores.e[0], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn selection_counts_and_tie_breaks_are_pinned() {
        let ids: Vec<u64> = (0..200).collect();
        let mut e = vec![1.0; 200];
        e[57] = 9.0;
        e[130] = 5.0;
        let scores = ErrorScores { e, ids: ids.clone() };
        let p = select_hegs(&scores, 1.0).unwrap();
        assert_eq!(p.heg_ids, vec![57, 130]);
        assert_eq!(p.leg_ids.len(), 198);

        // All-equal scores fall back to ascending ids.
        let flat = ErrorScores { e: vec![2.0; 200], ids };
        let p = select_hegs(&flat, 1.0).unwrap();
        assert_eq!(p.heg_ids, vec![0, 1]);

        // K = 100 selects everyone.
        let p = select_hegs(&flat, 100.0).unwrap();
        assert_eq!(p.heg_ids.len(), 200);
        assert!(p.leg_ids.is_empty());
    }

    #[test]
    fn selection_rejects_bad_inputs() {
        let empty = ErrorScores { e: vec![], ids: vec![] };
        assert!(matches!(select_hegs(&empty, 1.0), Err(TrainError::EmptySet)));
        let one = ErrorScores { e: vec![1.0], ids: vec![0] };
        assert!(matches!(select_hegs(&one, 0.0), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(select_hegs(&one, 101.0), Err(TrainError::InvalidConfig(_))));
        // A single surfel still yields one HEG.
        assert_eq!(select_hegs(&one, 1.0).unwrap().heg_ids, vec![0]);
    }

    #[test]
    fn partition_covers_the_set_and_orders_by_score() {
        let set = random_set(11, 40);
        let cameras: Vec<Camera> = (0..2).map(|i| ring_camera(i, 2)).collect();
        let gts = [wavy_image(16, 16, 0.0), wavy_image(16, 16, 2.0)];
        let scores =
            compute_error_scores(&set, &cameras, &gts, &RenderOptions::default()).unwrap();
        let p = select_hegs(&scores, 10.0).unwrap();
        assert_eq!(p.heg_ids.len(), 4);
        assert_eq!(p.heg_ids.len() + p.leg_ids.len(), 40);
        let idx = set.id_to_index();
        let min_heg =
            p.heg_ids.iter().map(|id| scores.e[idx[id]]).fold(f64::INFINITY, f64::min);
        let max_leg = p.leg_ids.iter().map(|id| scores.e[idx[id]]).fold(0.0, f64::max);
        assert!(min_heg >= max_leg, "every HEG must outscore every LEG");
    }

    #[test]
    fn cloning_appends_exact_copies_with_fresh_ids() {
        let mut set = random_set(3, 200);
        let hegs = vec![set.surfels[12].id, set.surfels[90].id];
        let pairs = clone_in_place(&mut set, &hegs).unwrap();
        assert_eq!(set.len(), 202);
        set.validate().unwrap();
        assert_eq!(pairs.len(), 2);
        for (parent_id, clone_id) in pairs {
            let idx = set.id_to_index();
            let parent = &set.surfels[idx[&parent_id]];
            let clone = &set.surfels[idx[&clone_id]];
            assert!(clone.is_clone);
            assert_eq!(clone.mu, parent.mu);
            assert_eq!(clone.quat, parent.quat);
            assert_eq!(clone.log_scale, parent.log_scale);
            assert_eq!(clone.raw_opacity, parent.raw_opacity);
            assert_eq!(clone.sh, parent.sh);
        }
        assert!(matches!(clone_in_place(&mut set, &[]), Err(TrainError::EmptyHegSet)));
    }

    #[test]
    fn cloning_preserves_median_depth_behind_a_saturating_front() {
        // Two stacked fronto-parallel surfels on the optical axis; the front
        // one alone drives transmittance through 0.5, so the median depth at
        // the center pixel is pinned to it and cloning cannot move it.
        let camera = Camera::new(16, 16, 20.0, 20.0, 8.0, 8.0, Matrix4::identity()).unwrap();
        let mut set = SurfelSet::new(0);
        for (z, raw) in [(2.0, 2.2), (3.0, 1.0)] {
            set.push(Surfel {
                mu: Vector3::new(0.0, 0.0, z),
                quat: [1.0, 0.0, 0.0, 0.0],
                log_scale: [0.0, 0.0],
                raw_opacity: raw,
                sh: vec![[0.3, 0.0, -0.3]],
                id: 0,
                heg: false,
                is_clone: false,
            });
        }
        let opts = RenderOptions::default();
        let before = render(&set, &camera, &opts).unwrap();
        clone_in_place(&mut set, &[0]).unwrap();
        let after = render(&set, &camera, &opts).unwrap();
        let (cx, cy) = (8, 8);
        assert!(before.accum.get(cx, cy) > 0.5);
        assert_eq!(before.depth_median.get(cx, cy), 2.0);
        assert_eq!(after.depth_median.get(cx, cy), before.depth_median.get(cx, cy));
        // Color does change: the doubled front surfel composits differently.
        assert_ne!(after.color.get(cx, cy), before.color.get(cx, cy));
    }
}
