//! Closed-form ray-splat intersection.
//!
//! A surfel spans the local plane `P(u, v) = mu + s_u u t_u + s_v v t_v`,
//! expressed homogeneously as a 4x4 matrix `H` whose columns are the scaled
//! tangents, a zero column and the center. With `W` the world-to-screen map
//! (producing `(xz, yz, z, z)`), a pixel `(x, y)` constrains the splat-local
//! point through two planes
//!
//!   h_u = (-1, 0, 0, x) (W H),   h_v = (0, -1, 0, y) (W H),
//!
//! and solving `h_u . (u, v, 1, 1) = h_v . (u, v, 1, 1) = 0` gives the exact
//! intersection in splat coordinates without any affine approximation.

use nalgebra::{Matrix4, Vector3};

use crate::camera::Camera;
use crate::sh::eval_color;
use crate::surfel::Surfel;

/// Guard below which the 2x2 intersection system is considered degenerate
/// (ray parallel to the splat plane).
pub const DENOM_EPS: f64 = 1e-9;

/// Knobs of the intersection test shared by rendering and footprints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    /// Gaussians are cut off where `u^2 + v^2 > cutoff^2`.
    pub cutoff: f64,
    /// Screen-space dilation: the Gaussian is replaced by an isotropic
    /// pixel-space Gaussian of this sigma wherever the latter is larger,
    /// which keeps sub-pixel splats from vanishing. `None` disables it.
    pub lowpass_sigma: Option<f64>,
    /// Intersections at or below this camera-space depth are skipped.
    pub near_clip: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { cutoff: 3.0, lowpass_sigma: Some(std::f64::consts::FRAC_1_SQRT_2), near_clip: 0.01 }
    }
}

/// A successful ray-splat intersection at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub surfel_id: u64,
    /// Splat-local coordinates in units of standard deviations.
    pub u: f64,
    pub v: f64,
    /// Camera-space depth of the intersection point.
    pub z: f64,
    /// Gaussian value after the screen-space low-pass guard.
    pub ghat: f64,
    /// `opacity * ghat`: the per-sample alpha before compositing.
    pub alpha_times_g: f64,
    /// True when the low-pass branch supplied `ghat`.
    pub lowpass_active: bool,
}

/// Splat-to-world homogeneous map (columns: `s_u t_u`, `s_v t_v`, `0`, `mu`).
pub fn build_h_matrix(surfel: &Surfel) -> Matrix4<f64> {
    let rot = surfel.rotation();
    let (su, sv) = surfel.scales();
    let tu = rot.column(0) * su;
    let tv = rot.column(1) * sv;
    Matrix4::new(
        tu.x, tv.x, 0.0, surfel.mu.x,
        tu.y, tv.y, 0.0, surfel.mu.y,
        tu.z, tv.z, 0.0, surfel.mu.z,
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Per-view quantities of one surfel that every pixel test reuses.
#[derive(Debug, Clone)]
pub struct SplatView {
    /// `W * H`: splat coordinates straight to homogeneous screen space.
    pub m: Matrix4<f64>,
    pub alpha: f64,
    /// View-dependent RGB from the spherical harmonics.
    pub color: [f64; 3],
    /// Camera-space depth of the center (sort key; <= near means culled).
    pub center_depth: f64,
    /// Projected center in pixels, when in front of the near plane.
    pub center_pix: Option<[f64; 2]>,
    /// Camera-frame surfel normal, unflipped.
    pub normal_cam: Vector3<f64>,
}

/// Precomputes the per-view state of `surfel` under `camera`.
pub fn splat_view(surfel: &Surfel, camera: &Camera, active_sh_degree: usize, near_clip: f64) -> SplatView {
    let h = build_h_matrix(surfel);
    let m = camera.world_to_screen() * h;
    let center_depth = camera.depth(&surfel.mu);
    let center_pix = camera.project(&surfel.mu, near_clip).map(|(x, y, _)| [x, y]);
    let dir = surfel.mu - camera.center();
    let color = if dir.norm() > 1e-12 {
        eval_color(&surfel.sh, active_sh_degree, &dir.normalize())
    } else {
        eval_color(&surfel.sh, 0, &Vector3::z())
    };
    let normal_cam = camera.rotation() * surfel.rotation().column(2).into_owned();
    SplatView { m, alpha: surfel.opacity(), color, center_depth, center_pix, normal_cam }
}

/// Raw intersection values before opacity is applied.
#[derive(Debug, Clone, Copy)]
pub struct RawHit {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub gauss: f64,
    pub ghat: f64,
    pub lowpass_active: bool,
    pub denom: f64,
}

/// Intersects the pixel ray `(x, y)` with a prepared splat.
///
/// Returns `None` when the system is degenerate, the hit is behind the near
/// plane, or the point lies outside the cutoff ellipse.
pub fn intersect_prepared(view: &SplatView, x: f64, y: f64, opts: &KernelOptions) -> Option<RawHit> {
    let m = &view.m;
    // h_u = x * row3(M) - row0(M), h_v = y * row3(M) - row1(M); the third
    // component is always zero because H's third column is zero, so only
    // indices 0, 1, 3 matter.
    let hu = [
        x * m[(3, 0)] - m[(0, 0)],
        x * m[(3, 1)] - m[(0, 1)],
        x * m[(3, 3)] - m[(0, 3)],
    ];
    let hv = [
        y * m[(3, 0)] - m[(1, 0)],
        y * m[(3, 1)] - m[(1, 1)],
        y * m[(3, 3)] - m[(1, 3)],
    ];
    let denom = hu[0] * hv[1] - hu[1] * hv[0];
    if denom.abs() < DENOM_EPS {
        return None;
    }
    let u = (hu[1] * hv[2] - hu[2] * hv[1]) / denom;
    let v = (hu[2] * hv[0] - hu[0] * hv[2]) / denom;
    let z = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 3)];
    if z <= opts.near_clip {
        return None;
    }
    // The cutoff applies to the *effective* (post max) Gaussian: a sub-pixel
    // splat whose uv footprint misses every pixel center still contributes
    // through the low-pass disk around its projected center.
    let r2 = u * u + v * v;
    let mut eff_r2 = r2;
    let gauss = (-0.5 * r2).exp();
    let mut ghat = gauss;
    let mut lowpass_active = false;
    if let (Some(sigma), Some(c)) = (opts.lowpass_sigma, view.center_pix) {
        let dx = x - c[0];
        let dy = y - c[1];
        let r2_pix = (dx * dx + dy * dy) / (sigma * sigma);
        let g2d = (-0.5 * r2_pix).exp();
        if g2d > gauss {
            ghat = g2d;
            lowpass_active = true;
            eff_r2 = r2_pix;
        }
    }
    if eff_r2 > opts.cutoff * opts.cutoff {
        return None;
    }
    Some(RawHit { u, v, z, gauss, ghat, lowpass_active, denom })
}

/// One-off ray-splat intersection for pixel `(x, y)`.
///
/// `active_sh_degree` only affects the cached color, not the geometry.
pub fn intersect(
    surfel: &Surfel,
    camera: &Camera,
    x: f64,
    y: f64,
    opts: &KernelOptions,
) -> Option<Intersection> {
    let view = splat_view(surfel, camera, 0, opts.near_clip);
    intersect_prepared(&view, x, y, opts).map(|hit| Intersection {
        surfel_id: surfel.id,
        u: hit.u,
        v: hit.v,
        z: hit.z,
        ghat: hit.ghat,
        alpha_times_g: view.alpha * hit.ghat,
        lowpass_active: hit.lowpass_active,
    })
}

/// Conservative pixel-space bounding box of the cutoff ellipse.
///
/// Projects the four corners `mu +- cutoff * s_u t_u +- cutoff * s_v t_v`
/// and pads by `margin` pixels; `None` when any corner falls behind the near
/// plane, in which case callers should fall back to the full image. Callers
/// using the low-pass guard must fold its disk radius
/// (`cutoff * lowpass_sigma` pixels) into `margin`.
pub fn screen_bbox(
    surfel: &Surfel,
    camera: &Camera,
    cutoff: f64,
    near_clip: f64,
    margin: f64,
) -> Option<(f64, f64, f64, f64)> {
    let rot = surfel.rotation();
    let (su, sv) = surfel.scales();
    let eu = rot.column(0) * (cutoff * su);
    let ev = rot.column(1) * (cutoff * sv);
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let corner = surfel.mu + eu * sx + ev * sy;
            let (px, py, _) = camera.project(&corner, near_clip)?;
            min_x = min_x.min(px);
            max_x = max_x.max(px);
            min_y = min_y.min(py);
            max_y = max_y.max(py);
        }
    }
    Some((min_x - margin, min_y - margin, max_x + margin, max_y + margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{normalize_quat, quat_mul, quat_to_rotation};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn rand_surfel(rng: &mut ChaCha8Rng, id: u64) -> Surfel {
        Surfel {
            mu: Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            quat: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            log_scale: [rng.random_range(-2.0..-0.5), rng.random_range(-2.0..-0.5)],
            raw_opacity: rng.random_range(-1.0..2.0),
            sh: vec![[0.5, 0.5, 0.5]],
            id,
            heg: false,
            is_clone: false,
        }
    }

    fn rand_camera(rng: &mut ChaCha8Rng) -> Camera {
        let eye = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-4.0..-2.5),
        );
        Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 64, 48, 70.0, 70.0).unwrap()
    }

    /// Independent oracle: march the world-space pixel ray onto the splat
    /// plane and read off (u, v, z) with plain vector arithmetic.
    fn ray_plane_oracle(surfel: &Surfel, camera: &Camera, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let origin = camera.center();
        let dir = camera.ray_dir_world(x, y);
        let rot = surfel.rotation();
        let n = rot.column(2).into_owned();
        let dn = dir.dot(&n);
        if dn.abs() < 1e-12 {
            return None;
        }
        let t = (surfel.mu - origin).dot(&n) / dn;
        let p = origin + dir * t;
        let local = p - surfel.mu;
        let (su, sv) = surfel.scales();
        let u = local.dot(&rot.column(0).into_owned()) / su;
        let v = local.dot(&rot.column(1).into_owned()) / sv;
        let z = camera.depth(&p);
        Some((u, v, z))
    }

    #[test]
    fn h_matrix_spans_the_splat_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = rand_surfel(&mut rng, 0);
        let h = build_h_matrix(&s);
        let rot = s.rotation();
        let (su, sv) = s.scales();
        for (u, v) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (-0.7, 2.3)] {
            let hp = h * Vector4::new(u, v, 1.0, 1.0);
            let direct = s.mu + rot.column(0) * (su * u) + rot.column(1) * (sv * v);
            assert_relative_eq!(hp.w, 1.0, epsilon = 1e-15);
            assert!((hp.xyz() - direct).norm() < 1e-12);
        }
        // Third column must vanish: the splat has no thickness.
        assert_eq!(h.column(2).iter().map(|v| v.abs()).fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn intersection_matches_ray_plane_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 300 {
            let s = rand_surfel(&mut rng, checked as u64);
            let cam = rand_camera(&mut rng);
            let x = rng.random_range(2.0..62.0);
            let y = rng.random_range(2.0..46.0);
            let opts = KernelOptions { cutoff: 1e9, lowpass_sigma: None, near_clip: 0.01 };
            let Some(hit) = intersect(&s, &cam, x, y, &opts) else { continue };
            let (ou, ov, oz) = ray_plane_oracle(&s, &cam, x, y).unwrap();
            assert_relative_eq!(hit.u, ou, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(hit.v, ov, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(hit.z, oz, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(hit.ghat, (-0.5 * (ou * ou + ov * ov)).exp(), max_relative = 1e-9);
            checked += 1;
        }
    }

    /// Rigidly moving the scene and the camera together leaves the
    /// intersection invariant.
    #[test]
    fn intersection_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let s = rand_surfel(&mut rng, trial);
            let cam = rand_camera(&mut rng);
            let x = rng.random_range(4.0..60.0);
            let y = rng.random_range(4.0..44.0);

            let qr = normalize_quat(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let r0 = quat_to_rotation(&qr);
            let t0 = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let mut s2 = s.clone();
            s2.mu = r0 * s.mu + t0;
            s2.quat = quat_mul(&qr, &normalize_quat(&s.quat));
            // Rigid inverse built analytically so the bottom row stays exact.
            let mut inv = Matrix4::identity();
            inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0.transpose());
            inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r0.transpose() * t0)));
            let w2c2 = cam.world_to_cam * inv;
            let cam2 = Camera::new(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, w2c2).unwrap();

            let opts = KernelOptions { cutoff: 1e9, lowpass_sigma: None, near_clip: 0.01 };
            let a = intersect(&s, &cam, x, y, &opts);
            let b = intersect(&s2, &cam2, x, y, &opts);
            match (a, b) {
                (Some(ha), Some(hb)) => {
                    assert_relative_eq!(ha.u, hb.u, epsilon = 1e-7, max_relative = 1e-7);
                    assert_relative_eq!(ha.v, hb.v, epsilon = 1e-7, max_relative = 1e-7);
                    assert_relative_eq!(ha.z, hb.z, epsilon = 1e-7, max_relative = 1e-7);
                }
                (None, None) => {}
                _ => panic!("rigid transform changed intersection existence"),
            }
        }
    }

    /// A ray parallel to the splat plane makes the 2x2 system singular.
    #[test]
    fn in_plane_ray_is_skipped() {
        // Camera at origin looking down +z; splat plane is y = 1 (normal
        // along y), so horizon-row rays run parallel to it.
        let cam = Camera::new(64, 48, 70.0, 70.0, 32.0, 24.0, Matrix4::identity()).unwrap();
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let s = Surfel {
            mu: Vector3::new(0.0, 1.0, 2.0),
            // 90 degree rotation about x: t_w = R e_z points along -y.
            quat: [half, half, 0.0, 0.0],
            log_scale: [0.0, 0.0],
            raw_opacity: 2.0,
            sh: vec![[0.5, 0.5, 0.5]],
            id: 0,
            heg: false,
            is_clone: false,
        };
        let opts = KernelOptions { cutoff: 1e9, lowpass_sigma: None, near_clip: 0.01 };
        // Principal ray: direction (0, 0, 1) has no component along the
        // plane normal.
        assert!(intersect(&s, &cam, 32.0, 24.0, &opts).is_none());
        // Well below the horizon the system is conditioned again: the ray
        // (0, 0.2, 1) meets y = 1 at z = 5.
        let hit = intersect(&s, &cam, 32.0, 38.0, &opts).unwrap();
        assert_relative_eq!(hit.z, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn near_and_cutoff_skips() {
        let cam = Camera::new(64, 48, 70.0, 70.0, 32.0, 24.0, Matrix4::identity()).unwrap();
        let s = Surfel {
            mu: Vector3::new(0.0, 0.0, 2.0),
            quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-2.0, -2.0],
            raw_opacity: 2.0,
            sh: vec![[0.5, 0.5, 0.5]],
            id: 0,
            heg: false,
            is_clone: false,
        };
        let opts = KernelOptions { cutoff: 3.0, lowpass_sigma: None, near_clip: 0.01 };
        assert!(intersect(&s, &cam, 32.0, 24.0, &opts).is_some());
        // 31.5 px off center is u = 31.5 * (z / f) / s_u ~ 6.7 sigma.
        assert!(intersect(&s, &cam, 63.5, 24.0, &opts).is_none());
        // Behind the camera.
        let mut behind = s.clone();
        behind.mu.z = -2.0;
        assert!(intersect(&behind, &cam, 32.0, 24.0, &opts).is_none());
    }

    #[test]
    fn lowpass_floor_keeps_tiny_splats_visible() {
        let cam = Camera::new(64, 48, 70.0, 70.0, 32.0, 24.0, Matrix4::identity()).unwrap();
        let s = Surfel {
            mu: Vector3::new(0.0, 0.0, 2.0),
            // ~0.00012 world units: far below a pixel at this distance.
            quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-9.0, -9.0],
            raw_opacity: 2.0,
            sh: vec![[0.5, 0.5, 0.5]],
            id: 0,
            heg: false,
            is_clone: false,
        };
        let no_lp = KernelOptions { cutoff: 3.0, lowpass_sigma: None, near_clip: 0.01 };
        let lp = KernelOptions::default();
        // 1.5 px off center: hopeless for the raw Gaussian, but inside the
        // low-pass disk of radius cutoff * sigma ~ 2.12 px.
        assert!(intersect(&s, &cam, 33.5, 24.0, &no_lp).is_none());
        let hit = intersect(&s, &cam, 33.5, 24.0, &lp).unwrap();
        assert!(hit.lowpass_active);
        assert_relative_eq!(hit.ghat, (-0.5 * (1.5f64 / FRAC_1_SQRT_2).powi(2)).exp(), max_relative = 1e-12);
        // 3 px off center: outside the low-pass disk as well.
        assert!(intersect(&s, &cam, 35.0, 24.0, &lp).is_none());
    }

    #[test]
    fn bbox_contains_all_hits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let s = rand_surfel(&mut rng, trial);
            let cam = rand_camera(&mut rng);
            let opts = KernelOptions { cutoff: 3.0, lowpass_sigma: None, near_clip: 0.01 };
            let Some((x0, y0, x1, y1)) = screen_bbox(&s, &cam, opts.cutoff, opts.near_clip, 0.0) else {
                continue;
            };
            for iy in 0..48 {
                for ix in 0..64 {
                    let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
                    if intersect(&s, &cam, x, y, &opts).is_some() {
                        assert!(
                            x >= x0 - 1e-9 && x <= x1 + 1e-9 && y >= y0 - 1e-9 && y <= y1 + 1e-9,
                            "hit at ({x}, {y}) outside bbox ({x0}, {y0}, {x1}, {y1})"
                        );
                    }
                }
            }
        }
    }
}
