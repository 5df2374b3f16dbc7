//! NeRF-synthetic style `transforms.json` camera ingestion and export.
//!
//! The file stores camera-to-world matrices in the OpenGL convention
//! (+x right, +y up, -z forward). The engine uses the OpenCV convention
//! (+x right, +y down, +z forward), so on load each rotation is re-based by
//! flipping the y and z axes, and the matrix is inverted into world-to-camera
//! form. Focal length comes from the shared horizontal field of view:
//! `fx = fy = width / (2 tan(camera_angle_x / 2))`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use surfelsplat_core::Camera;

use crate::DataError;

/// One ingested frame: the converted camera plus the image path recorded in
/// the JSON (relative to the file, extension optional, as in the source
/// datasets).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCamera {
    pub camera: Camera,
    pub file_path: String,
}

#[derive(Serialize, Deserialize)]
struct RawTransforms {
    camera_angle_x: f64,
    frames: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Loads a transforms file, producing one +z-forward camera per frame at the
/// given image resolution.
pub fn load_transforms(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
) -> Result<Vec<FrameCamera>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(DataError::io(path))?;
    let raw: RawTransforms = serde_json::from_str(&text)
        .map_err(|source| DataError::Json { path: path.into(), source })?;
    if !(raw.camera_angle_x > 0.0 && raw.camera_angle_x < std::f64::consts::PI) {
        return Err(DataError::Frame {
            index: 0,
            reason: format!("camera_angle_x {} outside (0, pi)", raw.camera_angle_x),
        });
    }
    let focal = 0.5 * width as f64 / (0.5 * raw.camera_angle_x).tan();
    raw.frames
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let frame: RawFrame = serde_json::from_value(value)
                .map_err(|e| DataError::Frame { index, reason: e.to_string() })?;
            let m = Matrix4::from_fn(|r, c| frame.transform_matrix[r][c]);
            let camera = camera_from_gl_c2w(&m, width, height, focal)
                .map_err(|reason| DataError::Frame { index, reason })?;
            Ok(FrameCamera { camera, file_path: frame.file_path })
        })
        .collect()
}

fn camera_from_gl_c2w(
    c2w_gl: &Matrix4<f64>,
    width: usize,
    height: usize,
    focal: f64,
) -> Result<Camera, String> {
    let bottom = c2w_gl.row(3);
    if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
        return Err("transform_matrix bottom row must be (0, 0, 0, 1)".into());
    }
    let r_gl = c2w_gl.fixed_view::<3, 3>(0, 0).into_owned();
    let t = c2w_gl.fixed_view::<3, 1>(0, 3).into_owned();
    // Camera-to-world basis change: GL columns are (right, up, backward);
    // flipping y and z yields (right, down, forward).
    let r_cv = r_gl * Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    let mut w2c = Matrix4::identity();
    w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_cv.transpose());
    w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r_cv.transpose() * t));
    Camera::new(width, height, focal, focal, width as f64 * 0.5, height as f64 * 0.5, w2c)
        .map_err(|e| e.to_string())
}

/// Exports frames in the same OpenGL camera-to-world convention that
/// [`load_transforms`] reads, so load -> save round-trips.
pub fn save_transforms(path: impl AsRef<Path>, frames: &[FrameCamera]) -> Result<(), DataError> {
    let path = path.as_ref();
    let first = frames.first().ok_or_else(|| DataError::Frame {
        index: 0,
        reason: "cannot export an empty camera list".into(),
    })?;
    let camera_angle_x = 2.0 * (0.5 * first.camera.width as f64 / first.camera.fx).atan();
    let frames: Vec<serde_json::Value> = frames
        .iter()
        .map(|f| {
            let r_cv = f.camera.rotation().transpose();
            let r_gl = r_cv * Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
            let t = f.camera.center();
            let mut c2w = Matrix4::identity();
            c2w.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_gl);
            c2w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            let matrix: Vec<Vec<f64>> =
                (0..4).map(|r| (0..4).map(|c| c2w[(r, c)]).collect()).collect();
            serde_json::json!({ "file_path": f.file_path, "transform_matrix": matrix })
        })
        .collect();
    let doc = serde_json::json!({ "camera_angle_x": camera_angle_x, "frames": frames });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|source| DataError::Json { path: path.into(), source })?;
    std::fs::write(path, text).map_err(DataError::io(path))
}
