//! Quaternion helpers and their derivatives.
//!
//! Quaternions are stored `(w, x, y, z)` and are *not* kept normalized;
//! every consumer renormalizes first, and the Jacobians below include that
//! normalization step so gradients are taken with respect to the raw values.

use nalgebra::{Matrix3, Vector3};

/// Returns `q / |q|`.
pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a * b`, both `(w, x, y, z)`.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation matrix of a *unit* quaternion `(w, x, y, z)`.
///
/// Columns are the rotated basis vectors, i.e. for a surfel the tangent
/// directions `t_u`, `t_v` and the normal `t_w`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of a raw (unnormalized) quaternion.
pub fn rotation_from_raw(q: &[f64; 4]) -> Matrix3<f64> {
    quat_to_rotation(&normalize_quat(q))
}

/// `dR/dq_hat` for a unit quaternion: one 3x3 matrix per component of
/// `(w, x, y, z)`.
fn rotation_jacobian_unit(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [dw, dx, dy, dz]
}

/// Backpropagates a gradient on the rotation matrix to the raw quaternion.
///
/// Chains `dR/dq_hat` with the normalization Jacobian
/// `dq_hat/dq = (I - q_hat q_hat^T) / |q|`.
pub fn rotation_backward(raw: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
    let qh = normalize_quat(raw);
    let jac = rotation_jacobian_unit(&qh);
    // Gradient with respect to the unit quaternion.
    let mut d_unit = [0.0; 4];
    for k in 0..4 {
        d_unit[k] = jac[k].component_mul(d_rot).sum();
    }
    let dot: f64 = (0..4).map(|i| d_unit[i] * qh[i]).sum();
    let mut out = [0.0; 4];
    for j in 0..4 {
        out[j] = (d_unit[j] - dot * qh[j]) / n;
    }
    out
}

/// Backpropagates a gradient on a *normalized* vector to the unnormalized one:
/// `d/dv normalize(v) = (I - n n^T) / |v|` applied to `d_n`.
pub fn normalize_backward(v: &Vector3<f64>, d_n: &Vector3<f64>) -> Vector3<f64> {
    let len = v.norm();
    let n = v / len;
    (d_n - n * n.dot(d_n)) / len
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_rotation(raw: &[f64; 4], k: usize, h: f64) -> Matrix3<f64> {
        let mut p = *raw;
        let mut m = *raw;
        p[k] += h;
        m[k] -= h;
        (rotation_from_raw(&p) - rotation_from_raw(&m)) / (2.0 * h)
    }

    #[test]
    fn rotation_is_orthonormal() {
        let q = normalize_quat(&[0.9, -0.3, 0.2, 0.1]);
        let r = quat_to_rotation(&q);
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        assert!(err < 1e-12, "R^T R deviates from identity by {err}");
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let raws = [
            [1.0, 0.0, 0.0, 0.0],
            [0.8, 0.4, -0.3, 0.2],
            [-0.5, 1.2, 0.7, -0.9],
        ];
        for raw in &raws {
            // Pair the analytic gradient with finite differences through a
            // scalar probe L = sum(R .* P) for a fixed random-ish P.
            let probe = Matrix3::new(0.3, -0.7, 0.2, 0.9, 0.1, -0.4, -0.6, 0.5, 0.8);
            let analytic = rotation_backward(raw, &probe);
            for k in 0..4 {
                let fd = fd_rotation(raw, k, 1e-6).component_mul(&probe).sum();
                assert_relative_eq!(analytic[k], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let v = Vector3::new(0.4, -1.3, 2.1);
        let d_n = Vector3::new(0.7, 0.2, -0.5);
        let analytic = normalize_backward(&v, &d_n);
        let h = 1e-7;
        for j in 0..3 {
            let mut p = v;
            let mut m = v;
            p[j] += h;
            m[j] -= h;
            let fd = (p.normalize() - m.normalize()).dot(&d_n) / (2.0 * h);
            assert_relative_eq!(analytic[j], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn quat_mul_composes_rotations() {
        let a = normalize_quat(&[0.7, 0.1, -0.4, 0.2]);
        let b = normalize_quat(&[0.2, 0.9, 0.3, -0.1]);
        let ab = quat_mul(&a, &b);
        let lhs = quat_to_rotation(&normalize_quat(&ab));
        let rhs = quat_to_rotation(&a) * quat_to_rotation(&b);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }
}
