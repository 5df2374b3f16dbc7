//! Training losses and their analytic gradients with respect to the
//! rasterizer outputs.
//!
//! Every term reports its contribution through [`LossGrads`], a container of
//! adjoints on the forward products: per-pixel color, per-contribution
//! blending weights and depths, the mean-depth map and per-surfel world
//! normals. The geometric backward pass consumes these and chains them to
//! surfel parameters.

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::image::{Image1, Image3};
use crate::math::normalize_backward;
use crate::raster::RenderOutputs;
use crate::surfel::SurfelSet;
use crate::CoreError;

/// Weights of the total loss `L = L_color + alpha * L_depth + beta * L_normal`,
/// with `L_color = (1 - lambda) L1 + lambda (1 - SSIM)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth_distortion: f64,
    pub normal_consistency: f64,
    pub ssim_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { depth_distortion: 0.0, normal_consistency: 0.05, ssim_lambda: 0.2 }
    }
}

/// Adjoints on the rasterizer outputs, ready for the geometric backward pass.
#[derive(Debug, Clone)]
pub struct LossGrads {
    /// dL / d(rendered color), per pixel.
    pub d_color: Image3,
    /// dL / d(contribution weight), parallel to `RenderOutputs::per_pixel`.
    pub d_weight: Vec<Vec<f64>>,
    /// dL / d(contribution depth), parallel to `RenderOutputs::per_pixel`.
    pub d_z: Vec<Vec<f64>>,
    /// dL / d(mean depth map).
    pub d_depth_mean: Image1,
    /// dL / d(world-frame surfel normal t_w), per surfel in set order.
    pub d_tw: Vec<Vector3<f64>>,
}

impl LossGrads {
    pub fn zeros(outputs: &RenderOutputs, n_surfels: usize) -> Self {
        let (w, h) = (outputs.color.width, outputs.color.height);
        Self {
            d_color: Image3::zeros(w, h),
            d_weight: outputs.per_pixel.iter().map(|c| vec![0.0; c.len()]).collect(),
            d_z: outputs.per_pixel.iter().map(|c| vec![0.0; c.len()]).collect(),
            d_depth_mean: Image1::zeros(w, h),
            d_tw: vec![Vector3::zeros(); n_surfels],
        }
    }
}

/// Individual loss values making up one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub depth_distortion: f64,
    pub normal_consistency: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Photometric: L1 + D-SSIM.

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian blur with zero padding ("same" size). Symmetric kernel,
/// so this map is self-adjoint; SSIM uses it through `normalize`, whose
/// adjoint is `blur(x / mass)`.
fn blur(img: &Image1) -> Image1 {
    let w = ssim_window();
    let r = SSIM_WINDOW / 2;
    let (width, height) = (img.width, img.height);
    let mut tmp = Image1::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let sx = x as isize + k as isize - r as isize;
                if sx >= 0 && (sx as usize) < width {
                    acc += wk * img.get(sx as usize, y);
                }
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Image1::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let sy = y as isize + k as isize - r as isize;
                if sy >= 0 && (sy as usize) < height {
                    acc += wk * tmp.get(x, sy as usize);
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// In-bounds kernel mass per pixel (the blur of an all-ones image); window
/// statistics are renormalized by it so that border windows stay unbiased
/// (a constant image has exactly constant mean and zero variance everywhere).
fn blur_mass(width: usize, height: usize) -> Image1 {
    blur(&Image1::filled(width, height, 1.0))
}

struct SsimChannel {
    value_sum: f64,
    d_a: Image1,
}

/// Windowed SSIM of one channel plus the gradient of its pixel sum with
/// respect to `a`.
fn ssim_channel(a: &Image1, b: &Image1) -> SsimChannel {
    let (width, height) = (a.width, a.height);
    let mass = blur_mass(width, height);
    let normalize = |img: &Image1| -> Image1 {
        let mut out = blur(img);
        for (v, m) in out.pixels_mut().iter_mut().zip(mass.pixels()) {
            *v /= m;
        }
        out
    };
    let mu_a = normalize(a);
    let mu_b = normalize(b);
    let mut aa = Image1::zeros(width, height);
    let mut bb = Image1::zeros(width, height);
    let mut ab = Image1::zeros(width, height);
    for i in 0..width * height {
        let (va, vb) = (a.pixels()[i], b.pixels()[i]);
        aa.pixels_mut()[i] = va * va;
        bb.pixels_mut()[i] = vb * vb;
        ab.pixels_mut()[i] = va * vb;
    }
    let e_aa = normalize(&aa);
    let e_bb = normalize(&bb);
    let e_ab = normalize(&ab);

    let mut value_sum = 0.0;
    let mut d_mu_path = Image1::zeros(width, height);
    let mut d_sa2 = Image1::zeros(width, height);
    let mut d_sab = Image1::zeros(width, height);
    for i in 0..width * height {
        let (ma, mb) = (mu_a.pixels()[i], mu_b.pixels()[i]);
        let sa2 = e_aa.pixels()[i] - ma * ma;
        let sb2 = e_bb.pixels()[i] - mb * mb;
        let sab = e_ab.pixels()[i] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * sab + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = sa2 + sb2 + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        value_sum += s;
        // Partials of s at this pixel.
        let ds_dmu = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
        let ds_dsa2 = -s / b2;
        let ds_dsab = 2.0 * a1 / (b1 * b2);
        // sigma_a^2 = E[a^2] - mu_a^2 and sigma_ab = E[ab] - mu_a mu_b pull
        // extra terms through mu_a.
        d_mu_path.pixels_mut()[i] = ds_dmu - 2.0 * ma * ds_dsa2 - mb * ds_dsab;
        d_sa2.pixels_mut()[i] = ds_dsa2;
        d_sab.pixels_mut()[i] = ds_dsab;
    }
    // Adjoint of the normalized blur x -> blur(x)/mass is y -> blur(y/mass).
    let adjoint = |img: &Image1| -> Image1 {
        let mut scaled = img.clone();
        for (v, m) in scaled.pixels_mut().iter_mut().zip(mass.pixels()) {
            *v /= m;
        }
        blur(&scaled)
    };
    let g_mu = adjoint(&d_mu_path);
    let g_sa2 = adjoint(&d_sa2);
    let g_sab = adjoint(&d_sab);
    let mut d_a = Image1::zeros(width, height);
    for i in 0..width * height {
        d_a.pixels_mut()[i] =
            g_mu.pixels()[i] + 2.0 * a.pixels()[i] * g_sa2.pixels()[i] + b.pixels()[i] * g_sab.pixels()[i];
    }
    SsimChannel { value_sum, d_a }
}

/// Mean SSIM over pixels and channels (no gradient); used for evaluation.
pub fn ssim_mean(a: &Image3, b: &Image3) -> Result<f64, CoreError> {
    a.same_shape(b)?;
    let n = (a.width * a.height) as f64;
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_channel(&a.channel(c), &b.channel(c)).value_sum / n;
    }
    Ok(total / 3.0)
}

/// `(1 - lambda) L1 + lambda (1 - SSIM)` and its gradient with respect to
/// the rendered image.
pub fn photometric_loss(
    render: &Image3,
    gt: &Image3,
    ssim_lambda: f64,
) -> Result<(f64, Image3), CoreError> {
    render.same_shape(gt)?;
    let (w, h) = (render.width, render.height);
    let n = (w * h) as f64;
    let mut grad = Image3::zeros(w, h);

    let mut l1 = 0.0;
    for i in 0..w * h {
        let r = render.pixels()[i];
        let g = gt.pixels()[i];
        for c in 0..3 {
            let d = r[c] - g[c];
            l1 += d.abs();
            grad.pixels_mut()[i][c] = (1.0 - ssim_lambda) * d.signum() / (3.0 * n);
        }
    }
    l1 /= 3.0 * n;

    let mut ssim = 0.0;
    if ssim_lambda != 0.0 {
        for c in 0..3 {
            let ch = ssim_channel(&render.channel(c), &gt.channel(c));
            ssim += ch.value_sum / n / 3.0;
            // d(1 - ssim_mean)/da = -d_a / (3 n).
            for i in 0..w * h {
                grad.pixels_mut()[i][c] -= ssim_lambda * ch.d_a.pixels()[i] / (3.0 * n);
            }
        }
    }
    let value = (1.0 - ssim_lambda) * l1 + ssim_lambda * (1.0 - ssim);
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Depth distortion.

/// `sum_{i,j} w_i w_j |z_i - z_j|` averaged over pixels with at least one
/// contribution, plus adjoints on the contribution weights and depths.
/// Evaluated in O(n log n) per pixel via prefix sums over depth-sorted
/// contributions.
pub fn depth_distortion_loss(outputs: &RenderOutputs) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_pix = outputs.per_pixel.iter().filter(|c| !c.is_empty()).count() as f64;
    let mut value = 0.0;
    let mut d_w: Vec<Vec<f64>> = Vec::with_capacity(outputs.per_pixel.len());
    let mut d_z: Vec<Vec<f64>> = Vec::with_capacity(outputs.per_pixel.len());
    for contribs in &outputs.per_pixel {
        let n = contribs.len();
        let mut dw = vec![0.0; n];
        let mut dz = vec![0.0; n];
        if n >= 2 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| contribs[a].z.total_cmp(&contribs[b].z));
            // Prefix/suffix sums of weights and weighted depths in z order.
            let total_w: f64 = contribs.iter().map(|c| c.weight).sum();
            let total_wz: f64 = contribs.iter().map(|c| c.weight * c.z).sum();
            let mut pre_w = 0.0;
            let mut pre_wz = 0.0;
            let mut pixel_value = 0.0;
            for &idx in &order {
                let (wi, zi) = (contribs[idx].weight, contribs[idx].z);
                let suf_w = total_w - pre_w - wi;
                let suf_wz = total_wz - pre_wz - wi * zi;
                pixel_value += 2.0 * wi * (zi * pre_w - pre_wz);
                dw[idx] = 2.0 * ((zi * pre_w - pre_wz) + (suf_wz - zi * suf_w));
                dz[idx] = 2.0 * wi * (pre_w - suf_w);
                pre_w += wi;
                pre_wz += wi * zi;
            }
            value += pixel_value;
        }
        d_w.push(dw);
        d_z.push(dz);
    }
    if n_pix > 0.0 {
        value /= n_pix;
        for pix in d_w.iter_mut().chain(d_z.iter_mut()) {
            for g in pix {
                *g /= n_pix;
            }
        }
    }
    (value, d_w, d_z)
}

// ---------------------------------------------------------------------------
// Normals from depth.

/// Camera-frame normal map derived from a depth map.
#[derive(Debug, Clone)]
pub struct NormalMap {
    /// Unit normals oriented toward the camera; zero where masked out.
    pub normal: Image3,
    pub mask: Vec<bool>,
}

/// Picks the difference stencil along one axis: central in the interior,
/// one-sided at the image border, `None` when any needed sample is invalid.
/// Returns `(minus, plus, inv_step)`.
fn stencil(i: usize, len: usize, valid: impl Fn(usize) -> bool) -> Option<(usize, usize, f64)> {
    if i > 0 && i + 1 < len {
        (valid(i - 1) && valid(i + 1)).then_some((i - 1, i + 1, 0.5))
    } else if i == 0 && len >= 2 {
        (valid(0) && valid(1)).then_some((0, 1, 1.0))
    } else if i + 1 == len && len >= 2 {
        (valid(len - 2) && valid(len - 1)).then_some((len - 2, len - 1, 1.0))
    } else {
        None
    }
}

/// Camera-space point of pixel `(x, y)` at `depth` (z = depth).
fn backproject(camera: &Camera, x: usize, y: usize, depth: f64) -> Vector3<f64> {
    camera.ray_dir_cam(x as f64 + 0.5, y as f64 + 0.5) * depth
}

/// Normals of the mean-depth surface via finite differences of backprojected
/// points. Pixels with `accum < 0.5`, or whose stencil touches such a pixel,
/// are masked out.
pub fn normal_from_depth(depth: &Image1, accum: &Image1, camera: &Camera) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let mut normal = Image3::zeros(w, h);
    let mut mask = vec![false; w * h];
    let valid = |x: usize, y: usize| accum.get(x, y) >= 0.5;
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            let Some((xl, xr, inv_dx)) = stencil(x, w, |xx| valid(xx, y)) else { continue };
            let Some((yl, yr, inv_dy)) = stencil(y, h, |yy| valid(x, yy)) else { continue };
            let gx = (backproject(camera, xr, y, depth.get(xr, y))
                - backproject(camera, xl, y, depth.get(xl, y)))
                * inv_dx;
            let gy = (backproject(camera, x, yr, depth.get(x, yr))
                - backproject(camera, x, yl, depth.get(x, yl)))
                * inv_dy;
            let c = gx.cross(&gy);
            let len = c.norm();
            if len < 1e-12 {
                continue;
            }
            let mut n = c / len;
            // Orient toward the camera (the surface point is at +z).
            let p = backproject(camera, x, y, depth.get(x, y));
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            normal.set(x, y, [n.x, n.y, n.z]);
            mask[y * w + x] = true;
        }
    }
    NormalMap { normal, mask }
}

// ---------------------------------------------------------------------------
// Normal consistency.

/// `mean over masked pixels of sum_i w_i (1 - n_i . N)` where `n_i` are the
/// camera-facing splat normals and `N` comes from the mean-depth map.
///
/// Returns the value and fills the relevant adjoints of `grads` (scaled by
/// `weight`): contribution weights, per-surfel world normals, and the
/// mean-depth map (through `N`).
pub fn normal_consistency_loss(
    set: &SurfelSet,
    camera: &Camera,
    outputs: &RenderOutputs,
    nmap: &NormalMap,
    weight: f64,
    grads: &mut LossGrads,
) -> Result<f64, CoreError> {
    let (w, h) = (outputs.color.width, outputs.color.height);
    let m = nmap.mask.iter().filter(|&&v| v).count();
    if m == 0 {
        return Ok(0.0);
    }
    let inv_m = 1.0 / m as f64;
    let id_to_index = set.id_to_index();
    let cam_rot = camera.rotation();
    // Camera-frame unflipped normals per surfel.
    let normals_cam: Vec<Vector3<f64>> = set
        .surfels
        .iter()
        .map(|s| cam_rot * s.rotation().column(2).into_owned())
        .collect();

    let mut value = 0.0;
    // dL/dN per pixel, consumed by the depth backward below.
    let mut g_n = Image3::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if !nmap.mask[y * w + x] {
                continue;
            }
            let nref = nmap.normal.get(x, y);
            let nref = Vector3::new(nref[0], nref[1], nref[2]);
            let ns = outputs.normal_splat.get(x, y);
            let ns = Vector3::new(ns[0], ns[1], ns[2]);
            value += inv_m * (outputs.accum.get(x, y) - ns.dot(&nref));
            let ray = camera.ray_dir_cam(x as f64 + 0.5, y as f64 + 0.5);
            for (k, contrib) in outputs.per_pixel[y * w + x].iter().enumerate() {
                let &idx = id_to_index
                    .get(&contrib.surfel_id)
                    .ok_or(CoreError::MissingContributions)?;
                let flip = if normals_cam[idx].dot(&ray) > 0.0 { -1.0 } else { 1.0 };
                let n_i = normals_cam[idx] * flip;
                grads.d_weight[y * w + x][k] += weight * inv_m * (1.0 - n_i.dot(&nref));
                // dL/dn_i = -w_i N / M, pulled back through the flip and the
                // camera rotation to the world-frame surfel normal.
                grads.d_tw[idx] +=
                    cam_rot.transpose() * (nref * (-weight * inv_m * contrib.weight * flip));
            }
            let gn = ns * (-weight * inv_m);
            g_n.set(x, y, [gn.x, gn.y, gn.z]);
        }
    }

    // Backprop N -> mean depth, mirroring normal_from_depth exactly.
    let valid = |x: usize, y: usize| outputs.accum.get(x, y) >= 0.5;
    for y in 0..h {
        for x in 0..w {
            if !nmap.mask[y * w + x] {
                continue;
            }
            let g = g_n.get(x, y);
            let g = Vector3::new(g[0], g[1], g[2]);
            if g == Vector3::zeros() {
                continue;
            }
            let (xl, xr, inv_dx) = stencil(x, w, |xx| valid(xx, y)).expect("masked pixel lost its stencil");
            let (yl, yr, inv_dy) = stencil(y, h, |yy| valid(x, yy)).expect("masked pixel lost its stencil");
            let gx = (backproject(camera, xr, y, outputs.depth_mean.get(xr, y))
                - backproject(camera, xl, y, outputs.depth_mean.get(xl, y)))
                * inv_dx;
            let gy = (backproject(camera, x, yr, outputs.depth_mean.get(x, yr))
                - backproject(camera, x, yl, outputs.depth_mean.get(x, yl)))
                * inv_dy;
            let c = gx.cross(&gy);
            let p = backproject(camera, x, y, outputs.depth_mean.get(x, y));
            let sign = if (c / c.norm()).dot(&p) > 0.0 { -1.0 } else { 1.0 };
            // N = sign * normalize(c); d c = sign * normalize_backward.
            let d_c = normalize_backward(&c, &(g * sign));
            let d_gx = gy.cross(&d_c);
            let d_gy = d_c.cross(&gx);
            // g_x = (dir(xr) z(xr) - dir(xl) z(xl)) * inv_dx.
            let mut bump = |px: usize, py: usize, d_p: Vector3<f64>| {
                let dir = camera.ray_dir_cam(px as f64 + 0.5, py as f64 + 0.5);
                grads.d_depth_mean.add(px, py, dir.dot(&d_p));
            };
            bump(xr, y, d_gx * inv_dx);
            bump(xl, y, -d_gx * inv_dx);
            bump(x, yr, d_gy * inv_dy);
            bump(x, yl, -d_gy * inv_dy);
        }
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Total.

/// Evaluates every enabled term and accumulates the combined adjoints.
pub fn total_loss(
    set: &SurfelSet,
    camera: &Camera,
    outputs: &RenderOutputs,
    gt: &Image3,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads), CoreError> {
    let mut grads = LossGrads::zeros(outputs, set.len());
    let (photo, d_color) = photometric_loss(&outputs.color, gt, weights.ssim_lambda)?;
    grads.d_color = d_color;

    let mut dd = 0.0;
    if weights.depth_distortion != 0.0 {
        let (value, d_w, d_z) = depth_distortion_loss(outputs);
        dd = value;
        for (acc, src) in grads.d_weight.iter_mut().zip(&d_w) {
            for (a, s) in acc.iter_mut().zip(src) {
                *a += weights.depth_distortion * s;
            }
        }
        for (acc, src) in grads.d_z.iter_mut().zip(&d_z) {
            for (a, s) in acc.iter_mut().zip(src) {
                *a += weights.depth_distortion * s;
            }
        }
    }

    let mut nc = 0.0;
    if weights.normal_consistency != 0.0 {
        let nmap = normal_from_depth(&outputs.depth_mean, &outputs.accum, camera);
        nc = normal_consistency_loss(set, camera, outputs, &nmap, weights.normal_consistency, &mut grads)?;
    }

    let total = photo + weights.depth_distortion * dd + weights.normal_consistency * nc;
    Ok((LossBreakdown { photometric: photo, depth_distortion: dd, normal_consistency: nc, total }, grads))
}
