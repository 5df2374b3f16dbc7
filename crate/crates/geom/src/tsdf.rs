//! Projective truncated signed distance fusion of rendered depth maps.

use nalgebra::Vector3;
use rayon::prelude::*;
use surfelsplat_core::{Camera, Image1};

use crate::GeomError;

/// A regular lattice of truncated signed distances.
///
/// `dims` counts lattice points per axis; cell `(i, j, k)` spans points
/// `(i..=i+1, j..=j+1, k..=k+1)`. Stored distances are scaled by the
/// truncation so they live in `[-1, 1]`; positive values are in front of the
/// observed surface (free space), negative behind it.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { origin, voxel_size, dims, tsdf: vec![0.0; n], weight: vec![0.0; n] }
    }

    /// A volume whose lattice covers `[min, max]` at the given resolution.
    pub fn from_bounds(min: Vector3<f64>, max: Vector3<f64>, voxel_size: f64) -> Self {
        let dims = std::array::from_fn(|i| ((max[i] - min[i]) / voxel_size).ceil() as usize + 1);
        Self::new(min, voxel_size, dims)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + self.voxel_size * Vector3::new(i as f64, j as f64, k as f64)
    }

    /// Default truncation band: four voxels.
    pub fn default_trunc(&self) -> f64 {
        4.0 * self.voxel_size
    }
}

/// Folds one rendered depth map into the volume (weight 1 per view).
///
/// Pixels whose accumulated alpha is below one half carry no reliable depth
/// and are skipped. Lattice points more than `trunc` behind the observed
/// depth are occluded and left untouched; points in front clamp to +1.
pub fn tsdf_integrate(
    volume: &mut TsdfVolume,
    depth: &Image1,
    accum: &Image1,
    camera: &Camera,
    trunc: f64,
) -> Result<(), GeomError> {
    if depth.width != camera.width || depth.height != camera.height {
        return Err(GeomError::VolumeCameraMismatch(
            depth.width,
            depth.height,
            camera.width,
            camera.height,
        ));
    }
    if accum.width != depth.width || accum.height != depth.height {
        return Err(GeomError::DimensionMismatch(
            accum.width,
            accum.height,
            depth.width,
            depth.height,
        ));
    }
    let [nx, ny, nz] = volume.dims;
    let (origin, vs) = (volume.origin, volume.voxel_size);
    // Each z-slab owns a disjoint range of the flat arrays.
    let slab = nx * ny;
    volume
        .tsdf
        .par_chunks_mut(slab)
        .zip(volume.weight.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, (tsdf, weight))| {
            debug_assert!(k < nz);
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + vs * Vector3::new(i as f64, j as f64, k as f64);
                    let pc = camera.to_cam(&p);
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let px = camera.fx * pc.x / pc.z + camera.cx;
                    let py = camera.fy * pc.y / pc.z + camera.cy;
                    if px < 0.0 || py < 0.0 {
                        continue;
                    }
                    let (ix, iy) = (px as usize, py as usize);
                    if ix >= camera.width || iy >= camera.height {
                        continue;
                    }
                    if accum.get(ix, iy) < 0.5 {
                        continue;
                    }
                    let sdf = depth.get(ix, iy) - pc.z;
                    if sdf < -trunc {
                        continue;
                    }
                    let sample = (sdf / trunc).min(1.0);
                    let idx = j * nx + i;
                    let w = weight[idx];
                    tsdf[idx] = (tsdf[idx] * w + sample) / (w + 1.0);
                    weight[idx] = w + 1.0;
                }
            }
        });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use surfelsplat_core::Image1;

    fn frontal_camera() -> Camera {
        Camera::new(64, 64, 80.0, 80.0, 32.0, 32.0, Matrix4::identity()).unwrap()
    }

    #[test]
    fn plane_signs_follow_the_convention() {
        let camera = frontal_camera();
        let depth = Image1::filled(64, 64, 2.0);
        let accum = Image1::filled(64, 64, 1.0);
        let mut vol =
            TsdfVolume::from_bounds(Vector3::new(-0.2, -0.2, 1.5), Vector3::new(0.2, 0.2, 2.5), 0.05);
        let trunc = vol.default_trunc();
        tsdf_integrate(&mut vol, &depth, &accum, &camera, trunc).unwrap();
        for k in 0..vol.dims[2] {
            let p = vol.point(2, 2, k);
            let idx = vol.index(2, 2, k);
            let sdf = 2.0 - p.z;
            if sdf < -trunc {
                assert_eq!(vol.weight[idx], 0.0, "occluded points stay untouched");
            } else {
                assert_eq!(vol.weight[idx], 1.0);
                assert!(vol.tsdf[idx] * sdf >= 0.0, "sign convention at z={}", p.z);
                assert!(vol.tsdf[idx].abs() <= 1.0 + 1e-12);
                if sdf.abs() < trunc {
                    assert!((vol.tsdf[idx] - sdf / trunc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reintegrating_a_view_doubles_weight_and_keeps_tsdf() {
        let camera = frontal_camera();
        let depth = Image1::filled(64, 64, 2.0);
        let accum = Image1::filled(64, 64, 1.0);
        let mut vol =
            TsdfVolume::from_bounds(Vector3::new(-0.2, -0.2, 1.6), Vector3::new(0.2, 0.2, 2.4), 0.05);
        let trunc = vol.default_trunc();
        tsdf_integrate(&mut vol, &depth, &accum, &camera, trunc).unwrap();
        let once = vol.clone();
        tsdf_integrate(&mut vol, &depth, &accum, &camera, trunc).unwrap();
        for i in 0..vol.tsdf.len() {
            assert!((vol.tsdf[i] - once.tsdf[i]).abs() < 1e-12);
            assert_eq!(vol.weight[i], 2.0 * once.weight[i]);
        }
    }

    #[test]
    fn low_accum_pixels_are_skipped() {
        let camera = frontal_camera();
        let depth = Image1::filled(64, 64, 2.0);
        let accum = Image1::filled(64, 64, 0.3);
        let mut vol =
            TsdfVolume::from_bounds(Vector3::new(-0.2, -0.2, 1.6), Vector3::new(0.2, 0.2, 2.4), 0.05);
        let trunc = vol.default_trunc();
        tsdf_integrate(&mut vol, &depth, &accum, &camera, trunc).unwrap();
        assert!(vol.weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn mismatched_depth_map_is_rejected() {
        let camera = frontal_camera();
        let depth = Image1::filled(32, 64, 2.0);
        let accum = Image1::filled(32, 64, 1.0);
        let mut vol = TsdfVolume::new(Vector3::zeros(), 0.1, [4, 4, 4]);
        assert!(tsdf_integrate(&mut vol, &depth, &accum, &camera, 0.4).is_err());
    }

    #[test]
    fn view_order_does_not_matter() {
        let cam_a = frontal_camera();
        let cam_b = Camera::look_at(
            Vector3::new(0.5, -0.3, 0.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(0.0, 1.0, 0.0),
            64,
            64,
            80.0,
            80.0,
        )
        .unwrap();
        let depth_a = Image1::filled(64, 64, 2.0);
        let depth_b = Image1::from_fn(64, 64, |x, _| 1.9 + 0.002 * x as f64);
        let accum = Image1::filled(64, 64, 1.0);
        let fresh = || {
            TsdfVolume::from_bounds(Vector3::new(-0.3, -0.3, 1.6), Vector3::new(0.3, 0.3, 2.4), 0.06)
        };
        let mut ab = fresh();
        let trunc = ab.default_trunc();
        tsdf_integrate(&mut ab, &depth_a, &accum, &cam_a, trunc).unwrap();
        tsdf_integrate(&mut ab, &depth_b, &accum, &cam_b, trunc).unwrap();
        let mut ba = fresh();
        tsdf_integrate(&mut ba, &depth_b, &accum, &cam_b, trunc).unwrap();
        tsdf_integrate(&mut ba, &depth_a, &accum, &cam_a, trunc).unwrap();
        for i in 0..ab.tsdf.len() {
            assert!((ab.tsdf[i] - ba.tsdf[i]).abs() < 1e-6);
            assert_eq!(ab.weight[i], ba.weight[i]);
        }
    }
}
