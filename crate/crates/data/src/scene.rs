//! Procedural multi-view scenes with exact ray-traced ground truth.
//!
//! Every scene is a couple of analytic surfaces (planes, spheres, boxes)
//! carrying a procedural texture, observed from a camera ring. Ground-truth
//! images and depth maps come from exact ray intersections, so they are free
//! of discretization error, and the ground-truth mesh is an analytic
//! tessellation of the same surfaces.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::str::FromStr;

use surfelsplat_core::sh;
use surfelsplat_core::{Camera, Image1, Image3, Surfel, SurfelSet};
use surfelsplat_geom::Mesh;

use crate::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    TexturedPlane,
    Sphere,
    PlanePlusSphere,
    CheckerBox,
}

impl FromStr for SceneKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "textured_plane" => Ok(Self::TexturedPlane),
            "sphere" => Ok(Self::Sphere),
            "plane_plus_sphere" => Ok(Self::PlanePlusSphere),
            "checker_box" => Ok(Self::CheckerBox),
            other => Err(DataError::UnknownKind(other.into())),
        }
    }
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TexturedPlane => "textured_plane",
            Self::Sphere => "sphere",
            Self::PlanePlusSphere => "plane_plus_sphere",
            Self::CheckerBox => "checker_box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    /// Blocky value noise: constant random color per texture cell.
    Noise,
    /// Smooth but rapidly varying sinusoid mix; exercises color that changes
    /// quickly over small spatial regions.
    Mottled,
}

impl FromStr for TextureKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "checker" => Ok(Self::Checker),
            "noise" => Ok(Self::Noise),
            "mottled" => Ok(Self::Mottled),
            other => Err(DataError::UnknownTexture(other.into())),
        }
    }
}

impl TextureKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Checker => "checker",
            Self::Noise => "noise",
            Self::Mottled => "mottled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneParams {
    pub kind: SceneKind,
    pub texture: TextureKind,
    pub n_cameras: usize,
    pub ring_radius: f64,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Checker tiles / noise cells / mottled base frequency across the
    /// texture domain.
    pub texture_scale: f64,
    pub n_seed_points: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            kind: SceneKind::TexturedPlane,
            texture: TextureKind::Checker,
            n_cameras: 20,
            ring_radius: 3.0,
            width: 64,
            height: 64,
            focal_factor: 1.1,
            texture_scale: 8.0,
            n_seed_points: 1500,
        }
    }
}

/// One initialization sample: a surface point with its local texture color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

/// Everything a training run needs about one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub cameras: Vec<Camera>,
    pub gt_images: Vec<Image3>,
    pub gt_depths: Vec<Image1>,
    /// Per-view hit masks (1 where a surface was hit).
    pub gt_masks: Vec<Image1>,
    pub gt_mesh: Option<Mesh>,
    /// Bounding radius of the geometry.
    pub extent: f64,
    pub seed_points: Vec<SeedPoint>,
}

// ---------------------------------------------------------------------------
// Textures.

const CHECKER_A: [f64; 3] = [0.92, 0.90, 0.82];
const CHECKER_B: [f64; 3] = [0.12, 0.10, 0.20];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Texture lookup on the wrapped unit square.
pub fn texture_color(texture: TextureKind, scale: f64, seed: u64, u: f64, v: f64) -> [f64; 3] {
    let (u, v) = (u.rem_euclid(1.0), v.rem_euclid(1.0));
    match texture {
        TextureKind::Checker => {
            let iu = (u * scale).floor() as i64;
            let iv = (v * scale).floor() as i64;
            if (iu + iv) % 2 == 0 {
                CHECKER_A
            } else {
                CHECKER_B
            }
        }
        TextureKind::Noise => {
            let iu = (u * scale).floor() as i64;
            let iv = (v * scale).floor() as i64;
            let h = splitmix(seed ^ (iu as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let h = splitmix(h ^ (iv as u64).wrapping_mul(0xc3a5c85c97cb3127));
            [
                0.08 + 0.84 * unit(splitmix(h ^ 1)),
                0.08 + 0.84 * unit(splitmix(h ^ 2)),
                0.08 + 0.84 * unit(splitmix(h ^ 3)),
            ]
        }
        TextureKind::Mottled => {
            let mut out = [0.0; 3];
            for (c, slot) in out.iter_mut().enumerate() {
                let h = splitmix(seed ^ (c as u64 + 11));
                let fa = scale * (0.8 + 0.6 * unit(h));
                let fb = scale * (0.8 + 0.6 * unit(splitmix(h)));
                let phase = std::f64::consts::TAU * unit(splitmix(h ^ 5));
                let s = (std::f64::consts::TAU * (fa * u + fb * v) + phase).sin();
                *slot = 0.5 + 0.42 * s;
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic surfaces.

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// Horizontal square at height `z` with half-extent `half`.
    Plane { z: f64, half: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned cube centered at the origin.
    Cube { half: f64 },
}

impl Surface {
    /// Nearest positive ray hit with its texture coordinates.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        match *self {
            Surface::Plane { z, half } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                if t <= 1e-9 {
                    return None;
                }
                let p = origin + t * dir;
                if p.x.abs() > half || p.y.abs() > half {
                    return None;
                }
                Some((t, (p.x + half) / (2.0 * half), (p.y + half) / (2.0 * half)))
            }
            Surface::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                if t <= 1e-9 {
                    return None;
                }
                let p = origin + t * dir - center;
                let u = 0.5 + p.y.atan2(p.x) / std::f64::consts::TAU;
                let v = (p.z / radius).clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
                Some((t, u, v))
            }
            Surface::Cube { half } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-12 {
                        if origin[k].abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let mut near = (-half - origin[k]) / dir[k];
                    let mut far = (half - origin[k]) / dir[k];
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 1e-9 {
                    return None;
                }
                let p = origin + t0 * dir;
                let (a, b) = match axis {
                    0 => (p.y, p.z),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                Some((t0, (a + half) / (2.0 * half), (b + half) / (2.0 * half)))
            }
        }
    }
}

fn surfaces(kind: SceneKind) -> Vec<Surface> {
    match kind {
        SceneKind::TexturedPlane => vec![Surface::Plane { z: 0.0, half: 1.0 }],
        SceneKind::Sphere => {
            vec![Surface::Sphere { center: Vector3::zeros(), radius: 1.0 }]
        }
        SceneKind::PlanePlusSphere => vec![
            Surface::Plane { z: 0.0, half: 1.2 },
            Surface::Sphere { center: Vector3::new(0.0, 0.0, 0.5), radius: 0.5 },
        ],
        SceneKind::CheckerBox => vec![Surface::Cube { half: 0.6 }],
    }
}

fn scene_extent(kind: SceneKind) -> f64 {
    match kind {
        SceneKind::TexturedPlane => std::f64::consts::SQRT_2,
        SceneKind::Sphere => 1.0,
        SceneKind::PlanePlusSphere => 1.2f64.hypot(1.2),
        SceneKind::CheckerBox => 0.6 * 3.0f64.sqrt(),
    }
}

/// Plane-bearing scenes are only observed from above.
fn one_sided(kind: SceneKind) -> bool {
    matches!(kind, SceneKind::TexturedPlane | SceneKind::PlanePlusSphere)
}

/// Deterministic camera ring; elevations cycle through a fixed irrational
/// pattern so the views are varied but reproducible.
pub fn camera_ring(params: &SceneParams) -> Vec<Camera> {
    let focal = params.focal_factor * params.width as f64;
    (0..params.n_cameras)
        .map(|i| {
            let theta = i as f64 / params.n_cameras as f64 * std::f64::consts::TAU;
            let frac = (i as f64 * 0.618_033_988_749_895).fract();
            let phi = if one_sided(params.kind) {
                0.35 + 0.4 * frac
            } else {
                let signed = if i % 2 == 0 { frac } else { -frac };
                0.15f64.copysign(signed) + 0.4 * signed
            };
            let eye = params.ring_radius
                * Vector3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 0.0, 1.0),
                params.width,
                params.height,
                focal,
                focal,
            )
            .expect("ring camera is valid")
        })
        .collect()
}

/// Ray-traces one view: color, z-depth and hit mask.
pub fn trace_view(
    params: &SceneParams,
    seed: u64,
    camera: &Camera,
) -> (Image3, Image1, Image1) {
    let surfs = surfaces(params.kind);
    let origin = camera.center();
    let (w, h) = (camera.width, camera.height);
    let mut color = Image3::zeros(w, h);
    let mut depth = Image1::zeros(w, h);
    let mut mask = Image1::zeros(w, h);
    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = camera.ray_dir_world(x as f64 + 0.5, y as f64 + 0.5);
                    let mut best: Option<(f64, f64, f64, usize)> = None;
                    for (si, s) in surfs.iter().enumerate() {
                        if let Some((t, u, v)) = s.intersect(&origin, &dir) {
                            if best.is_none_or(|b| t < b.0) {
                                best = Some((t, u, v, si));
                            }
                        }
                    }
                    match best {
                        // Offset the texture seed per surface so adjoining
                        // surfaces do not share a pattern.
                        Some((t, u, v, si)) => (
                            texture_color(
                                params.texture,
                                params.texture_scale,
                                seed.wrapping_add(si as u64 * 7919),
                                u,
                                v,
                            ),
                            t,
                            1.0,
                        ),
                        None => ([0.0; 3], 0.0, 0.0),
                    }
                })
                .collect()
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, t, m)) in row.into_iter().enumerate() {
            color.set(x, y, c);
            depth.set(x, y, t);
            mask.set(x, y, m);
        }
    }
    (color, depth, mask)
}

// ---------------------------------------------------------------------------
// Ground-truth meshes.

fn plane_mesh(mesh: &mut Mesh, z: f64, half: f64, cells: usize) {
    let base = mesh.vertices.len() as u32;
    let step = 2.0 * half / cells as f64;
    for j in 0..=cells {
        for i in 0..=cells {
            mesh.vertices.push([-half + i as f64 * step, -half + j as f64 * step, z]);
        }
    }
    let at = |i: usize, j: usize| base + (j * (cells + 1) + i) as u32;
    for j in 0..cells {
        for i in 0..cells {
            mesh.triangles.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            mesh.triangles.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
}

fn sphere_mesh(mesh: &mut Mesh, center: Vector3<f64>, radius: f64, segments: usize) {
    let rings = segments / 2;
    let base = mesh.vertices.len() as u32;
    for j in 0..=rings {
        let v = j as f64 / rings as f64 * std::f64::consts::PI;
        for i in 0..segments {
            let u = i as f64 / segments as f64 * std::f64::consts::TAU;
            let p = center
                + radius * Vector3::new(v.sin() * u.cos(), v.sin() * u.sin(), v.cos());
            mesh.vertices.push([p.x, p.y, p.z]);
        }
    }
    let at = |i: usize, j: usize| base + (j * segments + i % segments) as u32;
    for j in 0..rings {
        for i in 0..segments {
            let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            if j > 0 {
                mesh.triangles.push([a, b, c]);
            }
            if j + 1 < rings {
                mesh.triangles.push([a, c, d]);
            }
        }
    }
}

fn cube_mesh(mesh: &mut Mesh, half: f64) {
    let base = mesh.vertices.len() as u32;
    for k in 0..8u32 {
        let s = |bit: u32| if k >> bit & 1 == 1 { half } else { -half };
        mesh.vertices.push([s(0), s(1), s(2)]);
    }
    const QUADS: [[u32; 4]; 6] = [
        [0, 1, 3, 2],
        [4, 6, 7, 5],
        [0, 4, 5, 1],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 5, 7, 3],
    ];
    for q in QUADS {
        mesh.triangles.push([base + q[0], base + q[1], base + q[2]]);
        mesh.triangles.push([base + q[0], base + q[2], base + q[3]]);
    }
}

fn gt_mesh(kind: SceneKind) -> Mesh {
    let mut mesh = Mesh::default();
    match kind {
        SceneKind::TexturedPlane => plane_mesh(&mut mesh, 0.0, 1.0, 8),
        SceneKind::Sphere => sphere_mesh(&mut mesh, Vector3::zeros(), 1.0, 48),
        SceneKind::PlanePlusSphere => {
            plane_mesh(&mut mesh, 0.0, 1.2, 10);
            sphere_mesh(&mut mesh, Vector3::new(0.0, 0.0, 0.5), 0.5, 32);
        }
        SceneKind::CheckerBox => cube_mesh(&mut mesh, 0.6),
    }
    mesh
}

// ---------------------------------------------------------------------------
// Scene assembly.

/// Builds the full bundle: cameras, exact ground truth, mesh and seed
/// points. Deterministic: the same parameters and seed give a bit-identical
/// bundle.
pub fn make_scene(params: &SceneParams, seed: u64) -> Result<SceneBundle, DataError> {
    let cameras = camera_ring(params);
    let mut gt_images = Vec::with_capacity(cameras.len());
    let mut gt_depths = Vec::with_capacity(cameras.len());
    let mut gt_masks = Vec::with_capacity(cameras.len());
    for camera in &cameras {
        let (color, depth, mask) = trace_view(params, seed, camera);
        gt_images.push(color);
        gt_depths.push(depth);
        gt_masks.push(mask);
    }
    let mesh = gt_mesh(params.kind);
    let mut bundle = SceneBundle {
        cameras,
        gt_images,
        gt_depths,
        gt_masks,
        extent: scene_extent(params.kind),
        gt_mesh: Some(mesh),
        seed_points: Vec::new(),
    };
    bundle.seed_points = sample_seed_points(params, seed, &bundle);
    Ok(bundle)
}

/// Area-weighted surface samples colored from the nearest unoccluded
/// ground-truth pixel.
fn sample_seed_points(params: &SceneParams, seed: u64, bundle: &SceneBundle) -> Vec<SeedPoint> {
    let mesh = bundle.gt_mesh.as_ref().expect("scene always carries a mesh");
    let positions = mesh.sample_points(params.n_seed_points, splitmix(seed ^ 0x5eed));
    positions
        .into_iter()
        .map(|position| {
            let mut color = [0.5; 3];
            for (camera, (img, depth)) in bundle
                .cameras
                .iter()
                .zip(bundle.gt_images.iter().zip(&bundle.gt_depths))
            {
                let Some((px, py, z)) = camera.project(&position, 1e-6) else { continue };
                let (ix, iy) = (px as usize, py as usize);
                if px < 0.0 || py < 0.0 || ix >= camera.width || iy >= camera.height {
                    continue;
                }
                // Require the sample to be the visible surface there.
                if (depth.get(ix, iy) - z).abs() < 0.05 * bundle.extent {
                    color = img.get(ix, iy);
                    break;
                }
            }
            SeedPoint { position, color }
        })
        .collect()
}

impl SceneBundle {
    /// Mean nearest-neighbor distance between seed points.
    pub fn mean_seed_spacing(&self) -> f64 {
        let pts = &self.seed_points;
        if pts.len() < 2 {
            return 0.1 * self.extent.max(1e-6);
        }
        let total: f64 = pts
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let mut best = f64::INFINITY;
                for (j, b) in pts.iter().enumerate() {
                    if i != j {
                        best = best.min((a.position - b.position).norm());
                    }
                }
                best
            })
            .sum();
        total / pts.len() as f64
    }

    /// Initial surfel set: one surfel per seed point, scales equal to the
    /// mean seed spacing, opacity 0.1, flat zero-degree color matching the
    /// sampled texture, random orientation.
    pub fn initial_surfels(&self, max_sh_degree: usize, seed: u64) -> SurfelSet {
        let spacing = self.mean_seed_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x1217));
        let mut set = SurfelSet::new(max_sh_degree);
        let n_coeffs = surfelsplat_core::surfel::sh_coeff_count(max_sh_degree);
        let raw_opacity = (0.1f64 / 0.9).ln();
        for p in &self.seed_points {
            let quat = loop {
                let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n: f64 = q.iter().map(|v| v * v).sum();
                if n > 0.1 {
                    break q;
                }
            };
            let mut coeffs = vec![[0.0; 3]; n_coeffs];
            coeffs[0] = std::array::from_fn(|c| (p.color[c] - 0.5) / sh::C0);
            set.push(Surfel {
                mu: p.position,
                quat,
                log_scale: [spacing.ln(), spacing.ln()],
                raw_opacity,
                sh: coeffs,
                id: 0,
                heg: false,
                is_clone: false,
            });
        }
        set
    }
}
