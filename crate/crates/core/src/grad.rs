//! Analytic backward pass from loss adjoints to raw surfel parameters, and
//! the finite-difference harness that keeps it honest.
//!
//! The backward replays each pixel's recorded contribution list in reverse,
//! reconstructing transmittance exactly, accumulates per-surfel adjoints on
//! the projection matrix `M = W H`, then finalizes them into gradients on
//! `mu`, the raw quaternion, log scales, raw opacity and SH coefficients.
//! Work is split over fixed row bands merged in band order, so results are
//! bit-identical for any thread count.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::image::Image3;
use crate::kernel::{intersect_prepared, splat_view, SplatView};
use crate::losses::{
    depth_distortion_loss, normal_consistency_loss, normal_from_depth, photometric_loss, LossGrads,
    LossWeights,
};
use crate::math::{normalize_backward, rotation_backward};
use crate::raster::{render, RenderOptions, RenderOutputs};
use crate::sh::eval_color_backward;
use crate::surfel::{sh_coeff_count, Surfel, SurfelSet};
use crate::CoreError;

/// Per-surfel, per-parameter-class trainability. `true` means frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub mu: Vec<bool>,
    pub quat: Vec<bool>,
    pub log_scale: Vec<bool>,
    pub raw_opacity: Vec<bool>,
    pub sh: Vec<bool>,
}

impl FreezeMask {
    /// Everything trainable.
    pub fn none(n: usize) -> Self {
        Self {
            mu: vec![false; n],
            quat: vec![false; n],
            log_scale: vec![false; n],
            raw_opacity: vec![false; n],
            sh: vec![false; n],
        }
    }

    /// Everything frozen.
    pub fn all(n: usize) -> Self {
        Self {
            mu: vec![true; n],
            quat: vec![true; n],
            log_scale: vec![true; n],
            raw_opacity: vec![true; n],
            sh: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Freezes every class of surfel `i`.
    pub fn freeze_all_of(&mut self, i: usize) {
        self.mu[i] = true;
        self.quat[i] = true;
        self.log_scale[i] = true;
        self.raw_opacity[i] = true;
        self.sh[i] = true;
    }
}

/// Gradients on raw parameters plus the densification accumulators.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub mu: Vec<Vector3<f64>>,
    pub quat: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 2]>,
    pub raw_opacity: Vec<f64>,
    pub sh: Vec<Vec<[f64; 3]>>,
    /// Screen-scaled positional gradient magnitude per view (pixels), summed
    /// over the views of this backward call.
    pub screen_grad: Vec<f64>,
    /// Number of views in which the surfel contributed.
    pub seen: Vec<u32>,
    /// Largest screen-space cutoff radius (pixels) over contributing views.
    pub max_extent2d: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(set: &SurfelSet) -> Self {
        let n = set.len();
        let coeffs = sh_coeff_count(set.max_sh_degree);
        Self {
            mu: vec![Vector3::zeros(); n],
            quat: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 2]; n],
            raw_opacity: vec![0.0; n],
            sh: vec![vec![[0.0; 3]; coeffs]; n],
            screen_grad: vec![0.0; n],
            seen: vec![0; n],
            max_extent2d: vec![0.0; n],
        }
    }

    /// Accumulates another view's gradients (fixed order: caller iterates
    /// views sequentially).
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for i in 0..self.mu.len() {
            self.mu[i] += other.mu[i];
            for k in 0..4 {
                self.quat[i][k] += other.quat[i][k];
            }
            for k in 0..2 {
                self.log_scale[i][k] += other.log_scale[i][k];
            }
            self.raw_opacity[i] += other.raw_opacity[i];
            for (a, b) in self.sh[i].iter_mut().zip(&other.sh[i]) {
                for c in 0..3 {
                    a[c] += b[c];
                }
            }
            self.screen_grad[i] += other.screen_grad[i];
            self.seen[i] += other.seen[i];
            self.max_extent2d[i] = self.max_extent2d[i].max(other.max_extent2d[i]);
        }
    }

    fn apply_freeze(&mut self, freeze: &FreezeMask) {
        for i in 0..self.mu.len() {
            if freeze.mu[i] {
                self.mu[i] = Vector3::zeros();
            }
            if freeze.quat[i] {
                self.quat[i] = [0.0; 4];
            }
            if freeze.log_scale[i] {
                self.log_scale[i] = [0.0; 2];
            }
            if freeze.raw_opacity[i] {
                self.raw_opacity[i] = 0.0;
            }
            if freeze.sh[i] {
                for c in &mut self.sh[i] {
                    *c = [0.0; 3];
                }
            }
        }
    }
}

/// Per-surfel adjoint accumulators gathered during the pixel sweep.
struct Accum {
    d_m: Vec<Matrix4<f64>>,
    d_alpha: Vec<f64>,
    d_rgb: Vec<[f64; 3]>,
    d_cpix: Vec<[f64; 2]>,
    touched: Vec<bool>,
}

impl Accum {
    fn zeros(n: usize) -> Self {
        Self {
            d_m: vec![Matrix4::zeros(); n],
            d_alpha: vec![0.0; n],
            d_rgb: vec![[0.0; 3]; n],
            d_cpix: vec![[0.0; 2]; n],
            touched: vec![false; n],
        }
    }

    fn merge(&mut self, other: Accum) {
        for i in 0..self.d_m.len() {
            self.d_m[i] += other.d_m[i];
            self.d_alpha[i] += other.d_alpha[i];
            for c in 0..3 {
                self.d_rgb[i][c] += other.d_rgb[i][c];
            }
            self.d_cpix[i][0] += other.d_cpix[i][0];
            self.d_cpix[i][1] += other.d_cpix[i][1];
            self.touched[i] |= other.touched[i];
        }
    }
}

const ROWS_PER_BAND: usize = 16;

/// Analytic gradients of one view's loss adjoints with respect to every raw
/// parameter. Frozen classes come back exactly zero.
pub fn backward(
    set: &SurfelSet,
    camera: &Camera,
    outputs: &RenderOutputs,
    grads: &LossGrads,
    opts: &RenderOptions,
    freeze: &FreezeMask,
) -> Result<ParamGrads, CoreError> {
    if !opts.retain_contributions {
        return Err(CoreError::MissingContributions);
    }
    let (w, h) = (camera.width, camera.height);
    if outputs.per_pixel.len() != w * h || grads.d_weight.len() != w * h {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{} per-pixel lists", w * h),
            got: format!("{} / {}", outputs.per_pixel.len(), grads.d_weight.len()),
        });
    }
    if grads.d_tw.len() != set.len() || freeze.len() != set.len() {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{} surfels", set.len()),
            got: format!("d_tw {} / freeze {}", grads.d_tw.len(), freeze.len()),
        });
    }

    let kernel = opts.kernel();
    let views: Vec<SplatView> = set
        .surfels
        .par_iter()
        .map(|s| splat_view(s, camera, set.active_sh_degree, opts.near_clip))
        .collect();
    let id_to_index = set.id_to_index();

    // Pixel sweep in fixed row bands, merged in band order.
    let bands: Vec<Accum> = (0..h.div_ceil(ROWS_PER_BAND))
        .into_par_iter()
        .map(|band| {
            let mut acc = Accum::zeros(set.len());
            let y0 = band * ROWS_PER_BAND;
            let y1 = (y0 + ROWS_PER_BAND).min(h);
            for iy in y0..y1 {
                for ix in 0..w {
                    backward_pixel(
                        camera, outputs, grads, opts, &kernel, &views, &id_to_index, ix, iy,
                        &mut acc,
                    );
                }
            }
            acc
        })
        .collect();
    let mut acc = Accum::zeros(set.len());
    for band in bands {
        acc.merge(band);
    }

    // Finalize per surfel.
    let mut out = ParamGrads::zeros(set);
    let w_mat = camera.world_to_screen();
    let cam_center = camera.center();
    let f_mean = 0.5 * (camera.fx + camera.fy);
    for i in 0..set.len() {
        let has_tw = grads.d_tw[i] != Vector3::zeros();
        if !acc.touched[i] && !has_tw {
            continue;
        }
        let surfel = &set.surfels[i];
        let view = &views[i];
        let rot = surfel.rotation();
        let (su, sv) = surfel.scales();

        let d_h = w_mat.transpose() * acc.d_m[i];
        let d_col0 = Vector3::new(d_h[(0, 0)], d_h[(1, 0)], d_h[(2, 0)]);
        let d_col1 = Vector3::new(d_h[(0, 1)], d_h[(1, 1)], d_h[(2, 1)]);
        let mut d_mu = Vector3::new(d_h[(0, 3)], d_h[(1, 3)], d_h[(2, 3)]);

        let t_u = rot.column(0).into_owned();
        let t_v = rot.column(1).into_owned();
        out.log_scale[i][0] = su * t_u.dot(&d_col0);
        out.log_scale[i][1] = sv * t_v.dot(&d_col1);

        let mut d_rot = Matrix3::zeros();
        d_rot.set_column(0, &(d_col0 * su));
        d_rot.set_column(1, &(d_col1 * sv));
        d_rot.set_column(2, &grads.d_tw[i]);
        out.quat[i] = rotation_backward(&surfel.quat, &d_rot);

        // Low-pass branch: gradient on the projected center.
        let d_cpix = acc.d_cpix[i];
        if d_cpix != [0.0; 2] {
            let p_cam = camera.to_cam(&surfel.mu);
            let (xc, yc, zc) = (p_cam.x, p_cam.y, p_cam.z);
            let d_pcam = Vector3::new(
                d_cpix[0] * camera.fx / zc,
                d_cpix[1] * camera.fy / zc,
                -(d_cpix[0] * camera.fx * xc + d_cpix[1] * camera.fy * yc) / (zc * zc),
            );
            d_mu += camera.rotation().transpose() * d_pcam;
        }

        // SH path: color gradient to coefficients and, through the view
        // direction, back to the center.
        if acc.d_rgb[i] != [0.0; 3] {
            let dir_vec = surfel.mu - cam_center;
            if dir_vec.norm() > 1e-12 {
                let dir = dir_vec.normalize();
                let d_dir = eval_color_backward(
                    &surfel.sh,
                    set.active_sh_degree,
                    &dir,
                    &acc.d_rgb[i],
                    &mut out.sh[i],
                );
                d_mu += normalize_backward(&dir_vec, &d_dir);
            }
        }

        out.mu[i] = d_mu;
        let alpha = view.alpha;
        out.raw_opacity[i] = acc.d_alpha[i] * alpha * (1.0 - alpha);

        if acc.touched[i] {
            let px_per_unit = f_mean / view.center_depth;
            out.screen_grad[i] = d_mu.norm() * px_per_unit;
            out.seen[i] = 1;
            out.max_extent2d[i] = opts.cutoff * su.max(sv) * px_per_unit;
        }
    }
    out.apply_freeze(freeze);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    camera: &Camera,
    outputs: &RenderOutputs,
    grads: &LossGrads,
    opts: &RenderOptions,
    kernel: &crate::kernel::KernelOptions,
    views: &[SplatView],
    id_to_index: &std::collections::HashMap<u64, usize>,
    ix: usize,
    iy: usize,
    acc: &mut Accum,
) {
    let pix = iy * camera.width + ix;
    let contribs = &outputs.per_pixel[pix];
    if contribs.is_empty() {
        return;
    }
    let (px, py) = (ix as f64 + 0.5, iy as f64 + 0.5);
    let g_color = grads.d_color.get(ix, iy);
    let g_dm = grads.d_depth_mean.get(ix, iy);
    let sum_w = outputs.accum.get(ix, iy);
    let dm = outputs.depth_mean.get(ix, iy);
    let inv_denom = 1.0 / (sum_w + 1e-6);

    let n = contribs.len();
    // Total adjoint on each contribution weight and depth.
    let mut g_w = vec![0.0; n];
    let mut g_z = vec![0.0; n];
    let mut indices = vec![0usize; n];
    for (k, c) in contribs.iter().enumerate() {
        let i = id_to_index[&c.surfel_id];
        indices[k] = i;
        let color = views[i].color;
        g_w[k] = grads.d_weight[pix][k]
            + g_color[0] * color[0]
            + g_color[1] * color[1]
            + g_color[2] * color[2]
            + g_dm * (c.z - dm) * inv_denom;
        g_z[k] = grads.d_z[pix][k] + g_dm * c.weight * inv_denom;
    }

    // Compositing backward, back to front. S carries
    // sum_{j>k} g_w[j] w_j + g_bg * T_final.
    let last = &contribs[n - 1];
    let a_last = last.weight / last.trans;
    let t_final = last.trans * (1.0 - a_last);
    let g_bg = g_color[0] * opts.background[0]
        + g_color[1] * opts.background[1]
        + g_color[2] * opts.background[2];
    let mut s = g_bg * t_final;
    for k in (0..n).rev() {
        let c = &contribs[k];
        if c.trans < 1e-300 {
            // Transmittance underflow deep in an opaque stack; neither the
            // weight nor its gradient is representable.
            continue;
        }
        let i = indices[k];
        let view = &views[i];
        let a = c.weight / c.trans;
        let d_a = g_w[k] * c.trans - s / (1.0 - a);
        s += g_w[k] * c.weight;

        let hit = intersect_prepared(view, px, py, kernel)
            .expect("recorded contribution no longer intersects");
        debug_assert!((hit.u - c.u).abs() < 1e-9 && (hit.v - c.v).abs() < 1e-9 && (hit.z - c.z).abs() < 1e-9);

        // a = alpha * ghat, clamped just below 1; past the clamp the local
        // derivative is zero.
        let clamped = view.alpha * hit.ghat > 0.999_999;
        let (d_alpha, d_ghat) = if clamped { (0.0, 0.0) } else { (d_a * hit.ghat, d_a * view.alpha) };
        acc.d_alpha[i] += d_alpha;
        for ch in 0..3 {
            acc.d_rgb[i][ch] += c.weight * g_color[ch];
        }
        acc.touched[i] = true;

        let m = &view.m;
        // Depth chain: z = m20 u + m21 v + m23.
        let (mut g_u, mut g_v) = (g_z[k] * m[(2, 0)], g_z[k] * m[(2, 1)]);
        acc.d_m[i][(2, 0)] += g_z[k] * c.u;
        acc.d_m[i][(2, 1)] += g_z[k] * c.v;
        acc.d_m[i][(2, 3)] += g_z[k];

        if hit.lowpass_active {
            // ghat = exp(-((px-cx)^2 + (py-cy)^2) / (2 sigma^2)).
            let sigma = opts.lowpass_sigma.expect("low-pass hit without a sigma");
            let cpix = view.center_pix.expect("low-pass hit without a projected center");
            let s2 = sigma * sigma;
            acc.d_cpix[i][0] += d_ghat * hit.ghat * (px - cpix[0]) / s2;
            acc.d_cpix[i][1] += d_ghat * hit.ghat * (py - cpix[1]) / s2;
        } else {
            // ghat = exp(-(u^2 + v^2) / 2).
            g_u += d_ghat * (-c.u) * hit.ghat;
            g_v += d_ghat * (-c.v) * hit.ghat;
        }

        // (u, v) back to the h vectors (Cramer quotients), then to M.
        // Components are indexed [0, 1, 3] of the full 4-vectors.
        let hu = [
            px * m[(3, 0)] - m[(0, 0)],
            px * m[(3, 1)] - m[(0, 1)],
            px * m[(3, 3)] - m[(0, 3)],
        ];
        let hv = [
            py * m[(3, 0)] - m[(1, 0)],
            py * m[(3, 1)] - m[(1, 1)],
            py * m[(3, 3)] - m[(1, 3)],
        ];
        let d = hit.denom;
        let g_d = -(g_u * c.u + g_v * c.v) / d;
        let d_hu = [
            g_v * (-hv[2]) / d + g_d * hv[1],
            g_u * hv[2] / d - g_d * hv[0],
            g_u * (-hv[1]) / d + g_v * hv[0] / d,
        ];
        let d_hv = [
            g_v * hu[2] / d - g_d * hu[1],
            g_u * (-hu[2]) / d + g_d * hu[0],
            g_u * hu[1] / d + g_v * (-hu[0]) / d,
        ];
        for (j, col) in [0usize, 1, 3].into_iter().enumerate() {
            acc.d_m[i][(0, col)] -= d_hu[j];
            acc.d_m[i][(1, col)] -= d_hv[j];
            acc.d_m[i][(3, col)] += px * d_hu[j] + py * d_hv[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference harness.

/// Which loss terms the harness exercises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermMix {
    pub photometric: bool,
    pub depth_distortion: f64,
    pub normal_consistency: f64,
}

impl TermMix {
    pub fn color_only() -> Self {
        Self { photometric: true, depth_distortion: 0.0, normal_consistency: 0.0 }
    }
    pub fn depth_only() -> Self {
        Self { photometric: false, depth_distortion: 1.0, normal_consistency: 0.0 }
    }
    pub fn normal_only() -> Self {
        Self { photometric: false, depth_distortion: 0.0, normal_consistency: 1.0 }
    }
    pub fn combined() -> Self {
        Self { photometric: true, depth_distortion: 0.7, normal_consistency: 0.3 }
    }

    pub fn label(&self) -> String {
        match (self.photometric, self.depth_distortion != 0.0, self.normal_consistency != 0.0) {
            (true, false, false) => "color".into(),
            (false, true, false) => "depth-distortion".into(),
            (false, false, true) => "normal-consistency".into(),
            _ => "combined".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub scenes: usize,
    pub surfels: usize,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    /// Base central-difference step. Geometry-sensitive classes use a
    /// fraction of it (see [`class_step`]) so one step cannot push a cutoff
    /// ring past a pixel center.
    pub fd_step: f64,
    pub tolerance: f64,
    pub terms: TermMix,
}

/// Per-class FD step: position and orientation move the footprint hardest,
/// so they step shorter.
fn class_step(class: usize, base: f64) -> f64 {
    match class {
        0 => 0.4 * base,
        1 => 0.2 * base,
        _ => base,
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 5,
            surfels: 8,
            width: 16,
            height: 16,
            views: 2,
            fd_step: 1e-4,
            tolerance: 1e-3,
            terms: TermMix::combined(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub term_label: String,
    pub classes: Vec<ClassReport>,
    pub scenes_tested: usize,
    pub scenes_rejected: usize,
    /// Why scenes were rejected, by branch-boundary label.
    pub rejections: Vec<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

struct MicroScene {
    set: SurfelSet,
    cameras: Vec<Camera>,
    gts: Vec<Image3>,
}

fn gradcheck_render_options() -> RenderOptions {
    // Early termination is a step function of the parameters; disable it so
    // finite differences see a smooth objective.
    RenderOptions { early_stop: None, ..RenderOptions::default() }
}

/// Total objective of a micro-scene under the term mix.
fn scene_loss(scene: &MicroScene, terms: &TermMix, opts: &RenderOptions) -> f64 {
    let mut total = 0.0;
    for (camera, gt) in scene.cameras.iter().zip(&scene.gts) {
        let outputs = render(&scene.set, camera, opts).expect("render");
        if terms.photometric {
            total += photometric_loss(&outputs.color, gt, LossWeights::default().ssim_lambda)
                .expect("photometric")
                .0;
        }
        if terms.depth_distortion != 0.0 {
            total += terms.depth_distortion * depth_distortion_loss(&outputs).0;
        }
        if terms.normal_consistency != 0.0 {
            let nmap = normal_from_depth(&outputs.depth_mean, &outputs.accum, camera);
            let mut scratch = LossGrads::zeros(&outputs, scene.set.len());
            total += terms.normal_consistency
                * normal_consistency_loss(&scene.set, camera, &outputs, &nmap, 1.0, &mut scratch)
                    .expect("nc");
        }
    }
    total
}

/// Analytic gradient of the same objective.
fn scene_grad(scene: &MicroScene, terms: &TermMix, opts: &RenderOptions) -> ParamGrads {
    let freeze = FreezeMask::none(scene.set.len());
    let mut total = ParamGrads::zeros(&scene.set);
    for (camera, gt) in scene.cameras.iter().zip(&scene.gts) {
        let outputs = render(&scene.set, camera, opts).expect("render");
        let mut grads = LossGrads::zeros(&outputs, scene.set.len());
        if terms.photometric {
            let (_, d_color) = photometric_loss(&outputs.color, gt, LossWeights::default().ssim_lambda)
                .expect("photometric");
            grads.d_color = d_color;
        }
        if terms.depth_distortion != 0.0 {
            let (_, d_w, d_z) = depth_distortion_loss(&outputs);
            for (accum, src) in grads.d_weight.iter_mut().zip(&d_w) {
                for (a, s) in accum.iter_mut().zip(src) {
                    *a += terms.depth_distortion * s;
                }
            }
            for (accum, src) in grads.d_z.iter_mut().zip(&d_z) {
                for (a, s) in accum.iter_mut().zip(src) {
                    *a += terms.depth_distortion * s;
                }
            }
        }
        if terms.normal_consistency != 0.0 {
            let nmap = normal_from_depth(&outputs.depth_mean, &outputs.accum, camera);
            normal_consistency_loss(
                &scene.set,
                camera,
                &outputs,
                &nmap,
                terms.normal_consistency,
                &mut grads,
            )
            .expect("nc");
        }
        let view_grads = backward(&scene.set, camera, &outputs, &grads, opts, &freeze).expect("backward");
        total.add_assign(&view_grads);
    }
    total
}

/// Finite differences are only trustworthy away from the renderer's branch
/// boundaries; returns the first hazard found, if any.
///
/// Guards on skip boundaries (cutoff, near plane, degenerate denominators,
/// normal flips) only apply to pairs whose alpha could reach the compositing
/// threshold: a pair that composites nowhere near the perturbation has no
/// discontinuity to cross.
fn fd_rejection(scene: &MicroScene, terms: &TermMix, opts: &RenderOptions) -> Option<&'static str> {
    let kernel = opts.kernel();
    let cutoff2 = opts.cutoff * opts.cutoff;
    let g_cut = (-0.5 * cutoff2).exp();
    // Keep sub-near hits visible so the near-plane band can be tested.
    let wide = crate::kernel::KernelOptions { cutoff: 1e9, near_clip: 1e-6, ..kernel };
    for (camera, gt) in scene.cameras.iter().zip(&scene.gts) {
        let views: Vec<SplatView> = scene
            .set
            .surfels
            .iter()
            .map(|s| splat_view(s, camera, scene.set.active_sh_degree, opts.near_clip))
            .collect();
        // Per-surfel guards: SH clamp boundaries and near-plane centers.
        for (s, view) in scene.set.surfels.iter().zip(&views) {
            if view.center_depth < opts.near_clip + 0.05 {
                return Some("center-near-plane");
            }
            let dir = (s.mu - camera.center()).normalize();
            let mut basis = [0.0; 16];
            crate::sh::eval_basis(scene.set.active_sh_degree.min(s.sh_degree()), &dir, &mut basis);
            let nb = sh_coeff_count(scene.set.active_sh_degree.min(s.sh_degree()));
            for ch in 0..3 {
                let raw: f64 =
                    0.5 + s.sh.iter().take(nb).enumerate().map(|(k, c)| c[ch] * basis[k]).sum::<f64>();
                if raw.abs() < 5e-3 {
                    return Some("sh-clamp");
                }
            }
        }
        let outputs = render(&scene.set, camera, opts).expect("render");
        if terms.photometric {
            // Kink of the L1 term where rendered and reference agree. The
            // margin scales with the pixel's opacity mass, which bounds how
            // far one FD step can move the color.
            for iy in 0..camera.height {
                for ix in 0..camera.width {
                    if outputs.per_pixel[iy * camera.width + ix].is_empty() {
                        continue;
                    }
                    let a = outputs.color.get(ix, iy);
                    let b = gt.get(ix, iy);
                    let margin = 0.02 * outputs.accum.get(ix, iy);
                    if (0..3).any(|c| (a[c] - b[c]).abs() < margin) {
                        return Some("l1-kink");
                    }
                }
            }
        }
        if terms.normal_consistency != 0.0 && !normal_map_fd_safe(&outputs, camera) {
            return Some("normal-map");
        }
        for iy in 0..camera.height {
            for ix in 0..camera.width {
                let (px, py) = (ix as f64 + 0.5, iy as f64 + 0.5);
                // Examine every surfel at this pixel, not only recorded
                // contributors: skips must stay skips under perturbation.
                for view in &views {
                    let Some(hit) = intersect_prepared(view, px, py, &wide) else { continue };
                    let r2 = hit.u * hit.u + hit.v * hit.v;
                    // Effective radius the renderer tests against the cutoff:
                    // the winning branch of the max.
                    let mut eff_r2 = r2;
                    if let (Some(sigma), Some(c)) = (kernel.lowpass_sigma, view.center_pix) {
                        let r2p = ((px - c[0]).powi(2) + (py - c[1]).powi(2)) / (sigma * sigma);
                        if hit.lowpass_active {
                            eff_r2 = r2p;
                        }
                        // Kink where the max switches branch.
                        let g_lp = (-0.5 * r2p).exp();
                        if (hit.gauss - g_lp).abs() < 3e-3
                            && view.alpha * hit.gauss.max(g_lp) > 0.5 * opts.alpha_min
                            && r2.min(r2p) < cutoff2 + 0.01
                        {
                            return Some("max-tie");
                        }
                    }
                    // Cutoff band, only when alpha at the boundary still
                    // composites.
                    let live_at_cut = view.alpha * g_cut > opts.alpha_min - 3e-4;
                    if live_at_cut && (eff_r2 - cutoff2).abs() < 6e-3 {
                        return Some(if hit.lowpass_active { "lp-cutoff" } else { "uv-cutoff" });
                    }
                    // The remaining boundaries only matter where the pair is
                    // not already excluded by the cutoff.
                    if eff_r2 >= cutoff2 {
                        continue;
                    }
                    let a_now = view.alpha * hit.ghat;
                    if (a_now - opts.alpha_min).abs() < 2e-5 {
                        return Some("alpha-min");
                    }
                    if a_now <= 0.25 * opts.alpha_min {
                        continue;
                    }
                    if hit.denom.abs() < 1e-4 * hu_hv_scale(&view.m, px, py) {
                        return Some("denominator");
                    }
                    if (hit.z - opts.near_clip).abs() < 0.02 {
                        return Some("near-plane");
                    }
                    if (a_now - 0.999_999).abs() < 1e-4 {
                        return Some("alpha-ceiling");
                    }
                    if terms.normal_consistency != 0.0 {
                        let ray = camera.ray_dir_cam(px, py);
                        let align = view.normal_cam.dot(&ray) / (view.normal_cam.norm() * ray.norm());
                        if align.abs() < 1e-3 {
                            return Some("normal-flip");
                        }
                    }
                }
                if terms.normal_consistency != 0.0 {
                    let sw = outputs.accum.get(ix, iy);
                    if (sw - 0.5).abs() < 8e-4 {
                        return Some("mask-boundary");
                    }
                }
                if outputs.per_pixel[iy * camera.width + ix].len() + 1 >= opts.max_contributions {
                    return Some("contribution-cap");
                }
            }
        }
    }
    None
}

/// Rejects depth-derived normal maps with near-degenerate cross products or
/// near-flipping camera orientation, both of which are non-smooth.
fn normal_map_fd_safe(outputs: &RenderOutputs, camera: &Camera) -> bool {
    let (w, h) = (camera.width, camera.height);
    let valid = |x: usize, y: usize| outputs.accum.get(x, y) >= 0.5;
    let stencil = |i: usize, len: usize, ok: &dyn Fn(usize) -> bool| -> Option<(usize, usize, f64)> {
        if i > 0 && i + 1 < len {
            (ok(i - 1) && ok(i + 1)).then_some((i - 1, i + 1, 0.5))
        } else if i == 0 && len >= 2 {
            (ok(0) && ok(1)).then_some((0, 1, 1.0))
        } else if i + 1 == len && len >= 2 {
            (ok(len - 2) && ok(len - 1)).then_some((len - 2, len - 1, 1.0))
        } else {
            None
        }
    };
    let point = |x: usize, y: usize| {
        camera.ray_dir_cam(x as f64 + 0.5, y as f64 + 0.5) * outputs.depth_mean.get(x, y)
    };
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            let Some((xl, xr, inv_dx)) = stencil(x, w, &|xx| valid(xx, y)) else { continue };
            let Some((yl, yr, inv_dy)) = stencil(y, h, &|yy| valid(x, yy)) else { continue };
            let gx = (point(xr, y) - point(xl, y)) * inv_dx;
            let gy = (point(x, yr) - point(x, yl)) * inv_dy;
            let c = gx.cross(&gy);
            let norm = c.norm();
            let rel_cross = norm / (gx.norm() * gy.norm()).max(1e-12);
            if rel_cross < 5e-3 {
                return false;
            }
            let p = point(x, y);
            // The orientation sign gets shakier as the cross product
            // degenerates, so the band widens with 1 / rel_cross.
            if (c.dot(&p) / (norm * p.norm().max(1e-12))).abs() * rel_cross < 6e-3 {
                return false;
            }
        }
    }
    true
}

/// Magnitude scale of the h-vector cross products, for a relative
/// degeneracy test.
fn hu_hv_scale(m: &Matrix4<f64>, x: f64, y: f64) -> f64 {
    let hu = [x * m[(3, 0)] - m[(0, 0)], x * m[(3, 1)] - m[(0, 1)], x * m[(3, 3)] - m[(0, 3)]];
    let hv = [y * m[(3, 0)] - m[(1, 0)], y * m[(3, 1)] - m[(1, 1)], y * m[(3, 3)] - m[(1, 3)]];
    let nu = hu.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nv = hv.iter().map(|v| v * v).sum::<f64>().sqrt();
    (nu * nv).max(1e-12)
}

fn random_micro_scene(rng: &mut impl rand::Rng, cfg: &GradCheckConfig) -> MicroScene {
    let mut set = SurfelSet::new(1);
    set.active_sh_degree = 1;
    for _ in 0..cfg.surfels {
        let sh: Vec<[f64; 3]> = (0..4)
            .map(|k| {
                let amp = if k == 0 { 0.6 } else { 0.15 };
                [
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                ]
            })
            .collect();
        let quat = loop {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if q.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.6 {
                break q;
            }
        };
        set.push(Surfel {
            mu: Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            ),
            quat,
            log_scale: [rng.random_range(-1.2..-0.4), rng.random_range(-1.2..-0.4)],
            raw_opacity: rng.random_range(-1.0..1.5),
            sh,
            id: 0,
            heg: false,
            is_clone: false,
        });
    }
    let mut cameras = Vec::new();
    for v in 0..cfg.views {
        let angle = v as f64 * 2.2 + rng.random_range(-0.2..0.2);
        let eye = Vector3::new(3.0 * angle.cos(), 3.0 * angle.sin(), 1.2 + rng.random_range(-0.2..0.2));
        cameras.push(
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 0.0, 1.0),
                cfg.width,
                cfg.height,
                cfg.width as f64 * 0.9,
                cfg.width as f64 * 0.9,
            )
            .expect("camera"),
        );
    }
    // Ground truth: a perturbed render of the same scene, so photometric
    // gradients are non-trivial but bounded. The perturbation magnitude is
    // bounded away from zero to keep pixels off the L1 kink.
    let opts = gradcheck_render_options();
    let gts = cameras
        .iter()
        .map(|camera| {
            let base = render(&set, camera, &opts).expect("render").color;
            Image3::from_fn(cfg.width, cfg.height, |x, y| {
                let p = base.get(x, y);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let mag = rng.random_range(0.05..0.2);
                    let noise = if rng.random_bool(0.5) { mag } else { -mag };
                    out[c] = (p[c] + noise).clamp(0.0, 1.0);
                }
                out
            })
        })
        .collect();
    MicroScene { set, cameras, gts }
}

fn perturb(scene: &mut MicroScene, surfel: usize, class: usize, index: usize, delta: f64) {
    let s = &mut scene.set.surfels[surfel];
    match class {
        0 => s.mu[index] += delta,
        1 => s.quat[index] += delta,
        2 => s.log_scale[index] += delta,
        3 => s.raw_opacity += delta,
        _ => s.sh[index / 3][index % 3] += delta,
    }
}

const CLASS_NAMES: [&str; 5] = ["mu", "quat", "log_scale", "raw_opacity", "sh"];

fn class_param_count(class: usize, sh_len: usize) -> usize {
    match class {
        0 => 3,
        1 => 4,
        2 => 2,
        3 => 1,
        _ => 3 * sh_len,
    }
}

fn analytic_entry(grads: &ParamGrads, surfel: usize, class: usize, index: usize) -> f64 {
    match class {
        0 => grads.mu[surfel][index],
        1 => grads.quat[surfel][index],
        2 => grads.log_scale[surfel][index],
        3 => grads.raw_opacity[surfel],
        _ => grads.sh[surfel][index / 3][index % 3],
    }
}

/// Verifies the analytic backward pass against central finite differences on
/// randomly generated micro-scenes, skipping scenes that straddle renderer
/// branch boundaries.
pub fn gradcheck(cfg: &GradCheckConfig) -> GradCheckReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = gradcheck_render_options();
    let mut classes: Vec<ClassReport> = CLASS_NAMES
        .iter()
        .map(|&class| ClassReport { class, checked: 0, max_rel_err: 0.0 })
        .collect();
    let mut tested = 0;
    let mut rejected = 0;
    let mut reasons: std::collections::BTreeMap<&'static str, usize> = Default::default();
    while tested < cfg.scenes {
        let mut scene = random_micro_scene(&mut rng, cfg);
        if let Some(reason) = fd_rejection(&scene, &cfg.terms, &opts) {
            *reasons.entry(reason).or_default() += 1;
            rejected += 1;
            if rejected > 1000 {
                break;
            }
            continue;
        }
        let analytic = scene_grad(&scene, &cfg.terms, &opts);
        let sh_len = sh_coeff_count(scene.set.max_sh_degree);
        for surfel in 0..scene.set.len() {
            for class in 0..5 {
                let step = class_step(class, cfg.fd_step);
                for index in 0..class_param_count(class, sh_len) {
                    perturb(&mut scene, surfel, class, index, step);
                    let plus = scene_loss(&scene, &cfg.terms, &opts);
                    perturb(&mut scene, surfel, class, index, -2.0 * step);
                    let minus = scene_loss(&scene, &cfg.terms, &opts);
                    perturb(&mut scene, surfel, class, index, step);
                    let fd = (plus - minus) / (2.0 * step);
                    let an = analytic_entry(&analytic, surfel, class, index);
                    let denom = an.abs().max(fd.abs());
                    if denom > 1e-8 {
                        // Differences below 1e-9 are inside the central-
                        // difference noise floor; count them as agreement.
                        let abs = (an - fd).abs();
                        let rel = if abs <= 1e-9 { 0.0 } else { abs / denom };
                        classes[class].checked += 1;
                        if rel > classes[class].max_rel_err {
                            classes[class].max_rel_err = rel;
                        }
                    }
                }
            }
        }
        tested += 1;
    }
    let passed = tested > 0 && classes.iter().all(|c| c.max_rel_err < cfg.tolerance);
    GradCheckReport {
        term_label: cfg.terms.label(),
        classes,
        scenes_tested: tested,
        scenes_rejected: rejected,
        rejections: reasons.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        tolerance: cfg.tolerance,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_surfel_scene() -> (SurfelSet, Camera) {
        let mut set = SurfelSet::new(0);
        set.push(Surfel {
            mu: Vector3::new(0.0, 0.0, 0.0),
            quat: [0.9, 0.1, -0.2, 0.05],
            log_scale: [-0.7, -0.9],
            raw_opacity: 0.8,
            sh: vec![[0.3, -0.2, 0.5]],
            id: 0,
            heg: false,
            is_clone: false,
        });
        let camera = Camera::look_at(
            Vector3::new(0.0, -2.5, 1.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            24,
            20,
            30.0,
            30.0,
        )
        .unwrap();
        (set, camera)
    }

    /// Closed-form check: with L = sum of rendered color and degree-0 SH,
    /// dL/dc_00 per channel is Y_00 * sum of weights over the footprint
    /// (when the channel is unclamped).
    #[test]
    fn constant_sh_gradient_matches_weight_sum() {
        let (set, camera) = single_surfel_scene();
        let opts = gradcheck_render_options();
        let outputs = render(&set, &camera, &opts).unwrap();
        let mut grads = LossGrads::zeros(&outputs, set.len());
        let (w, h) = (camera.width, camera.height);
        for y in 0..h {
            for x in 0..w {
                grads.d_color.set(x, y, [1.0, 1.0, 1.0]);
            }
        }
        let freeze = FreezeMask::none(1);
        let pg = backward(&set, &camera, &outputs, &grads, &opts, &freeze).unwrap();
        let weight_sum: f64 = outputs.per_pixel.iter().flatten().map(|c| c.weight).sum();
        let y00 = 0.28209479177387814;
        for ch in 0..3 {
            approx::assert_relative_eq!(pg.sh[0][0][ch], weight_sum * y00, max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_loss_grads_give_zero_param_grads() {
        let (set, camera) = single_surfel_scene();
        let opts = gradcheck_render_options();
        let outputs = render(&set, &camera, &opts).unwrap();
        let grads = LossGrads::zeros(&outputs, set.len());
        let pg = backward(&set, &camera, &outputs, &grads, &opts, &FreezeMask::none(1)).unwrap();
        assert_eq!(pg.mu[0], Vector3::zeros());
        assert_eq!(pg.quat[0], [0.0; 4]);
        assert_eq!(pg.raw_opacity[0], 0.0);
    }

    #[test]
    fn frozen_blocks_are_exactly_zero() {
        let (set, camera) = single_surfel_scene();
        let opts = gradcheck_render_options();
        let outputs = render(&set, &camera, &opts).unwrap();
        let mut grads = LossGrads::zeros(&outputs, set.len());
        for y in 0..camera.height {
            for x in 0..camera.width {
                grads.d_color.set(x, y, [0.3, -0.1, 0.2]);
            }
        }
        let mut freeze = FreezeMask::none(1);
        freeze.freeze_all_of(0);
        let pg = backward(&set, &camera, &outputs, &grads, &opts, &freeze).unwrap();
        assert_eq!(pg.mu[0], Vector3::zeros());
        assert_eq!(pg.quat[0], [0.0; 4]);
        assert_eq!(pg.log_scale[0], [0.0; 2]);
        assert_eq!(pg.raw_opacity[0], 0.0);
        assert!(pg.sh[0].iter().all(|c| *c == [0.0; 3]));
        // Densification accumulators still report visibility.
        assert_eq!(pg.seen[0], 1);
    }

    #[test]
    fn backward_requires_contributions() {
        let (set, camera) = single_surfel_scene();
        let opts = RenderOptions { retain_contributions: false, ..gradcheck_render_options() };
        let outputs = render(&set, &camera, &opts).unwrap();
        let grads = LossGrads::zeros(&outputs, set.len());
        let err = backward(&set, &camera, &outputs, &grads, &opts, &FreezeMask::none(1));
        assert!(matches!(err, Err(CoreError::MissingContributions)));
    }

    /// Additivity over views: a two-view backward equals the sum of the
    /// single-view backwards exactly.
    #[test]
    fn gradients_are_additive_across_views() {
        let cfg = GradCheckConfig { scenes: 1, ..GradCheckConfig::default() };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let scene = random_micro_scene(&mut rng, &cfg);
        let opts = gradcheck_render_options();
        let terms = TermMix::combined();
        let combined = scene_grad(&scene, &terms, &opts);
        let mut summed = ParamGrads::zeros(&scene.set);
        for v in 0..scene.cameras.len() {
            let single = MicroScene {
                set: scene.set.clone(),
                cameras: vec![scene.cameras[v].clone()],
                gts: vec![scene.gts[v].clone()],
            };
            summed.add_assign(&scene_grad(&single, &terms, &opts));
        }
        for i in 0..scene.set.len() {
            assert_eq!(combined.mu[i], summed.mu[i]);
            assert_eq!(combined.quat[i], summed.quat[i]);
            assert_eq!(combined.raw_opacity[i], summed.raw_opacity[i]);
        }
    }

    // The full finite-difference sweeps live in the integration test suite
    // (tests/gradcheck.rs); they are the expensive part.
}
