//! Pinhole camera with an OpenCV-style frame: +x right, +y down, +z forward.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::CoreError;

/// A calibrated pinhole camera.
///
/// `world_to_cam` is a rigid transform whose rotation block maps world
/// directions into the camera frame. Pixel `(x, y)` refers to the continuous
/// image plane; samples are taken at pixel centers `(ix + 0.5, iy + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_cam: Matrix4<f64>,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_cam: Matrix4<f64>,
    ) -> Result<Self, CoreError> {
        if width == 0 || height == 0 {
            return Err(CoreError::InvalidCamera("zero image dimensions".into()));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CoreError::InvalidCamera(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(CoreError::InvalidCamera(format!("principal point ({cx}, {cy}) outside the image")));
        }
        let r = world_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > 1e-6 {
            return Err(CoreError::InvalidCamera(format!("rotation block not orthonormal (error {ortho_err:.2e})")));
        }
        let bottom = world_to_cam.row(3);
        if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(CoreError::InvalidCamera("bottom row must be (0, 0, 0, 1)".into()));
        }
        Ok(Self { width, height, fx, fy, cx, cy, world_to_cam })
    }

    /// Camera placed at `eye` looking at `target`, with `up` fixing the roll.
    /// The principal point defaults to the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
    ) -> Result<Self, CoreError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| CoreError::InvalidCamera("look_at eye coincides with target".into()))?;
        // +y points down, so the image "up" direction is -y.
        let x = (-up)
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| CoreError::InvalidCamera("look_at up parallel to view direction".into()))?;
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -rot * eye;
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(width, height, fx, fy, width as f64 * 0.5, height as f64 * 0.5, w2c)
    }

    /// Rotation block of `world_to_cam`.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        let r = self.rotation();
        let t = self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned();
        -(r.transpose() * t)
    }

    /// Projection from world homogeneous coordinates to the homogeneous
    /// screen point `(xz, yz, z, z)`: intrinsics stacked so both of the last
    /// rows carry camera depth.
    pub fn world_to_screen(&self) -> Matrix4<f64> {
        let k = Matrix4::new(
            self.fx, 0.0, self.cx, 0.0,
            0.0, self.fy, self.cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        k * self.world_to_cam
    }

    /// Camera-space point of a world point.
    pub fn to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.world_to_cam * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
    }

    /// Camera-space depth (z) of a world point.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.to_cam(p).z
    }

    /// Perspective projection to pixel coordinates; `None` behind `near`.
    pub fn project(&self, p: &Vector3<f64>, near: f64) -> Option<(f64, f64, f64)> {
        let c = self.to_cam(p);
        if c.z <= near {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// Camera-frame ray direction through pixel `(x, y)`, z = 1.
    pub fn ray_dir_cam(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// World-frame (unnormalized) ray direction through pixel `(x, y)`.
    pub fn ray_dir_world(&self, x: f64, y: f64) -> Vector3<f64> {
        self.rotation().transpose() * self.ray_dir_cam(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_puts_target_on_axis() {
        let eye = Vector3::new(2.0, -1.0, 3.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        let cam = Camera::look_at(eye, target, Vector3::new(0.0, 0.0, 1.0), 64, 48, 60.0, 60.0).unwrap();
        let c = cam.to_cam(&target);
        assert_relative_eq!(c.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.z, (target - eye).norm(), epsilon = 1e-12);
        assert_relative_eq!((cam.center() - eye).norm(), 0.0, epsilon = 1e-10);
        let (px, py, _) = cam.project(&target, 0.01).unwrap();
        assert_relative_eq!(px, 32.0, epsilon = 1e-9);
        assert_relative_eq!(py, 24.0, epsilon = 1e-9);
    }

    #[test]
    fn world_to_screen_duplicates_depth() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            32,
            32,
            40.0,
            40.0,
        )
        .unwrap();
        let p = Vector3::new(0.3, -0.2, 0.5);
        let s = cam.world_to_screen() * Vector4::new(p.x, p.y, p.z, 1.0);
        let z = cam.depth(&p);
        assert_relative_eq!(s[2], z, epsilon = 1e-12);
        assert_relative_eq!(s[3], z, epsilon = 1e-12);
        let (px, py, _) = cam.project(&p, 0.01).unwrap();
        assert_relative_eq!(s[0] / s[3], px, epsilon = 1e-9);
        assert_relative_eq!(s[1] / s[3], py, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_cameras() {
        let mut skewed = Matrix4::identity();
        skewed[(0, 1)] = 0.5;
        assert!(Camera::new(8, 8, 10.0, 10.0, 4.0, 4.0, skewed).is_err());
        assert!(Camera::new(8, 8, -1.0, 10.0, 4.0, 4.0, Matrix4::identity()).is_err());
        assert!(Camera::new(8, 8, 10.0, 10.0, 9.0, 4.0, Matrix4::identity()).is_err());
    }
}
