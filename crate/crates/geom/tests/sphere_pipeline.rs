//! Depth fusion round trip against an analytic sphere: render exact depth
//! maps by ray-sphere intersection, fuse them into a TSDF, extract the mesh
//! and compare with the known radius.

use nalgebra::Vector3;
use surfelsplat_core::{Camera, Image1};
use surfelsplat_geom::{marching_cubes, tsdf_integrate, TsdfVolume};

const RADIUS: f64 = 1.0;

fn ring_camera(index: usize, total: usize) -> Camera {
    let theta = index as f64 / total as f64 * std::f64::consts::TAU;
    let phi: f64 = if index % 2 == 0 { 0.5 } else { -0.5 };
    let eye = 3.0 * Vector3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
    Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 64, 64, 70.0, 70.0)
        .unwrap()
}

/// Exact z-depth of the first ray-sphere hit through each pixel.
fn analytic_depth(camera: &Camera) -> (Image1, Image1) {
    let mut depth = Image1::zeros(64, 64);
    let mut accum = Image1::zeros(64, 64);
    let origin = camera.center();
    for y in 0..64 {
        for x in 0..64 {
            let dir = camera.ray_dir_world(x as f64 + 0.5, y as f64 + 0.5);
            let (a, b, c) =
                (dir.dot(&dir), origin.dot(&dir), origin.dot(&origin) - RADIUS * RADIUS);
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / a;
            if t <= 0.0 {
                continue;
            }
            // The camera-space direction has unit z, so the parameter t is
            // exactly the z-depth of the hit.
            depth.set(x, y, t);
            accum.set(x, y, 1.0);
        }
    }
    (depth, accum)
}

#[test]
fn fused_sphere_surface_sits_within_one_voxel_of_the_radius() {
    let voxel = 0.05;
    let mut volume = TsdfVolume::from_bounds(
        Vector3::new(-1.31, -1.29, -1.32),
        Vector3::new(1.29, 1.31, 1.28),
        voxel,
    );
    let trunc = volume.default_trunc();
    for i in 0..20 {
        let camera = ring_camera(i, 20);
        let (depth, accum) = analytic_depth(&camera);
        tsdf_integrate(&mut volume, &depth, &accum, &camera, trunc).unwrap();
    }
    let mesh = marching_cubes(&volume, 0.0);
    mesh.validate().unwrap();
    assert!(mesh.triangles.len() > 500, "only {} triangles", mesh.triangles.len());
    let mut worst = 0.0f64;
    for v in &mesh.vertices {
        let err = (Vector3::from(*v).norm() - RADIUS).abs();
        worst = worst.max(err);
    }
    assert!(worst < voxel, "worst radial error {worst} (voxel {voxel})");

    // The reconstructed area should approximate the analytic sphere's.
    let area = mesh.total_area();
    let expected = 4.0 * std::f64::consts::PI * RADIUS * RADIUS;
    assert!((area - expected).abs() / expected < 0.1, "area {area} vs {expected}");
}
