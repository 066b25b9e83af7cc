//! Small SO(3)/quaternion helpers shared by the mechanization, preintegration
//! and visual modules.
//!
//! Quaternions are scalar-first `[w, x, y, z]` and attitude perturbations are
//! right-multiplicative: `q ⊕ δθ = q ⊗ exp(δθ)` with `δθ` a body-frame
//! rotation vector.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

/// Skew-symmetric cross-product matrix `[v×]`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion exponential of a rotation vector.
pub fn quat_exp(rotvec: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*rotvec)
}

/// Rotation vector of a unit quaternion (inverse of [`quat_exp`]).
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Left-multiplication matrix: `q ⊗ p = quat_left(q) * p` (scalar-first).
pub fn quat_left(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right-multiplication matrix: `p ⊗ q = quat_right(q) * p` (scalar-first).
pub fn quat_right(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Vector (imaginary) part of a quaternion.
pub fn quat_vec(q: &Quaternion<f64>) -> Vector3<f64> {
    Vector3::new(q.i, q.j, q.k)
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ) exp(Jr(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let px = skew(phi);
    if angle < 1e-8 {
        return Matrix3::identity() - 0.5 * px + px * px / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - px * ((1.0 - angle.cos()) / a2)
        + (px * px) * ((angle - angle.sin()) / (a2 * angle))
}

/// Deterministic orthonormal basis of the tangent plane at unit vector `n`.
///
/// `b1 = normalize(n × a)` with `a = e_z` unless `|n·e_z| > 0.9`, in which
/// case `a = e_x`; `b2 = n × b1`.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    let b1 = n.cross(&a).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// Angle in radians between two attitudes.
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    (a.inverse() * b).angle()
}
