//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Colors are stored as SH coefficients per channel; evaluation follows the
//! usual splatting recipe: `rgb = max(0, sum_k c_k Y_k(d) + 0.5)` where `d`
//! is the unit direction from the camera center to the surfel center.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;

/// Degree-0 basis value; `0.5 + C0 * c` recovers the flat color of a
/// direction-independent surfel.
pub const C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Evaluates the basis functions for `degree` at unit direction `d`
/// into `out` (length at least `(degree + 1)^2`).
pub fn eval_basis(degree: usize, d: &Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * zz - xx - yy);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[9] = C3[0] * y * (3.0 * xx - yy);
        out[10] = C3[1] * x * y * z;
        out[11] = C3[2] * y * (4.0 * zz - xx - yy);
        out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        out[13] = C3[4] * x * (4.0 * zz - xx - yy);
        out[14] = C3[5] * z * (xx - yy);
        out[15] = C3[6] * x * (xx - 3.0 * yy);
    }
}

/// Gradient of each basis function with respect to the direction components.
fn eval_basis_grad(degree: usize, d: &Vector3<f64>, out: &mut [Vector3<f64>]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = Vector3::zeros();
    if degree >= 1 {
        out[1] = Vector3::new(0.0, -C1, 0.0);
        out[2] = Vector3::new(0.0, 0.0, C1);
        out[3] = Vector3::new(-C1, 0.0, 0.0);
    }
    if degree >= 2 {
        out[4] = C2[0] * Vector3::new(y, x, 0.0);
        out[5] = C2[1] * Vector3::new(0.0, z, y);
        out[6] = C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        out[7] = C2[3] * Vector3::new(z, 0.0, x);
        out[8] = C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[9] = C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        out[10] = C3[1] * Vector3::new(y * z, x * z, x * y);
        out[11] = C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        out[12] = C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        out[13] = C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        out[14] = C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        out[15] = C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
}

/// RGB color of coefficients `sh` seen from unit direction `dir`,
/// evaluated at `degree` (clamped to what `sh` can support).
pub fn eval_color(sh: &[[f64; 3]], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let degree = effective_degree(sh.len(), degree);
    let n = (degree + 1) * (degree + 1);
    let mut basis = [0.0; 16];
    eval_basis(degree, dir, &mut basis);
    let mut rgb = [0.5; 3];
    for (k, c) in sh.iter().take(n).enumerate() {
        for ch in 0..3 {
            rgb[ch] += c[ch] * basis[k];
        }
    }
    for v in &mut rgb {
        *v = v.max(0.0);
    }
    rgb
}

/// Backward pass of [`eval_color`]. Adds `d_rgb` contributions into the
/// per-coefficient gradient `d_sh` and returns the gradient with respect to
/// the (unit) direction. Channels clamped to zero in the forward pass pass
/// no gradient.
pub fn eval_color_backward(
    sh: &[[f64; 3]],
    degree: usize,
    dir: &Vector3<f64>,
    d_rgb: &[f64; 3],
    d_sh: &mut [[f64; 3]],
) -> Vector3<f64> {
    let degree = effective_degree(sh.len(), degree);
    let n = (degree + 1) * (degree + 1);
    let mut basis = [0.0; 16];
    let mut grads = [Vector3::zeros(); 16];
    eval_basis(degree, dir, &mut basis);
    eval_basis_grad(degree, dir, &mut grads);
    // Recompute pre-clamp values to gate the gradient.
    let mut raw = [0.5; 3];
    for (k, c) in sh.iter().take(n).enumerate() {
        for ch in 0..3 {
            raw[ch] += c[ch] * basis[k];
        }
    }
    let gate = [raw[0] > 0.0, raw[1] > 0.0, raw[2] > 0.0];
    let mut d_dir = Vector3::zeros();
    for k in 0..n {
        for ch in 0..3 {
            if gate[ch] {
                d_sh[k][ch] += basis[k] * d_rgb[ch];
                d_dir += sh[k][ch] * d_rgb[ch] * grads[k];
            }
        }
    }
    d_dir
}

fn effective_degree(coeff_len: usize, requested: usize) -> usize {
    let capacity = (coeff_len as f64).sqrt() as usize - 1;
    requested.min(capacity).min(MAX_DEGREE)
}
