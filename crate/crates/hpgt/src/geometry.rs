//! Minimal SO(3)/SE(3) toolbox: rotations, quaternion multiplication operators,
//! screw invariants and the Jacobians of the exponential map.
//!
//! Quaternion convention: Hamilton product, scalar-first storage `(w, x, y, z)`,
//! passive rotations. Hemisphere normalization (`w >= 0`) is applied wherever
//! quaternions are compared or returned from linear solves.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

/// Angle floor below which the screw translation `d = .../sin(theta)` is
/// considered ill-conditioned.
pub const SCREW_ANGLE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("relative rotation angle {0:.3e} rad is below the screw-invariant floor")]
    DegenerateScrew(f64),
}

/// A rotation matrix in SO(3).
///
/// Stored as a 3x3 matrix; constructors either guarantee orthonormality by
/// construction (`exp`, `from_quaternion`) or re-project to the manifold
/// (`from_matrix`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation { m: Matrix3::identity() }
    }

    /// Wraps a matrix assumed to already satisfy the SO(3) invariants.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation { m }
    }

    /// Projects an approximately-orthonormal matrix onto SO(3) via SVD.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Rotation { m: r }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Deviation from orthonormality, `max(|R^T R - I|, |det R - 1|)`.
    pub fn orthonormality_defect(&self) -> f64 {
        let d = self.m.transpose() * self.m - Matrix3::identity();
        d.abs().max().max((self.m.determinant() - 1.0).abs())
    }

    /// Exponential map (Rodrigues formula) with a second-order Taylor branch
    /// for `|phi| < 1e-6`.
    pub fn exp(phi: Vector3<f64>) -> Self {
        let theta2 = phi.norm_squared();
        let hat = skew(&phi);
        let (a, b) = if theta2 < 1e-12 {
            // sin(t)/t and (1-cos t)/t^2 Taylor coefficients
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rotation { m: Matrix3::identity() + a * hat + b * hat * hat }
    }

    /// Principal logarithm, `|result| <= pi`.
    ///
    /// Near `theta = pi` the axis is recovered from the largest diagonal entry
    /// of `(R + I)/2`; the sign of the axis follows the off-diagonal part of
    /// `R` and degrades gracefully to the "largest component positive"
    /// convention exactly at the boundary.
    pub fn log(&self) -> Vector3<f64> {
        let r = &self.m;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let anti = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        // theta from atan2(sin, cos) stays well-conditioned over the whole
        // range; acos alone loses ~1/sin(theta) digits near pi.
        let sin_theta = 0.5 * anti.norm();
        let theta = sin_theta.atan2(cos_theta);
        if theta < 1e-6 {
            // log(R) ~ 0.5 * (1 + theta^2/6) * (R - R^T)^vee
            return 0.5 * (1.0 + theta * theta / 6.0) * anti;
        }
        if theta < std::f64::consts::PI - 1e-6 {
            return (theta / (2.0 * sin_theta)) * anti;
        }
        // Near-pi branch: the antisymmetric part vanishes, but Shepperd's
        // quaternion extraction recovers the axis from the dominant diagonal
        // entry at full precision. Hemisphere normalization keeps the angle in
        // [0, pi]; exactly at pi the branch choice makes the largest axis
        // component positive.
        let q = UnitQuaternion::from_rotation(self).hemisphere_normalized();
        let v = Vector3::new(q.x, q.y, q.z);
        let vn = v.norm();
        let theta = 2.0 * vn.atan2(q.w);
        v * (theta / vn)
    }

    pub fn transpose(&self) -> Rotation {
        Rotation { m: self.m.transpose() }
    }

    pub fn angle(&self) -> f64 {
        // The logarithm's atan2 form stays accurate at tiny angles, where
        // acos of the trace bottoms out near sqrt(eps).
        self.log().norm()
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        UnitQuaternion::from_rotation(self)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation { m: self.m * rhs.m }
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.m * rhs
    }
}

/// Unit quaternion, Hamilton convention, scalar-first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes the given components to unit length.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        UnitQuaternion { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    /// Returns the same rotation with `w >= 0`.
    pub fn hemisphere_normalized(&self) -> Self {
        if self.w < 0.0 {
            UnitQuaternion { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn from_vector_normalize(v: Vector4<f64>) -> Self {
        UnitQuaternion::new_normalize(v[0], v[1], v[2], v[3])
    }

    /// Hamilton product `self (x) rhs`.
    pub fn hamilton(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        UnitQuaternion {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    pub fn conjugate(&self) -> UnitQuaternion {
        UnitQuaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn to_rotation(&self) -> Rotation {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Rotation { m }
    }

    /// Shepperd's method: stable rotation-matrix to quaternion conversion.
    pub fn from_rotation(r: &Rotation) -> UnitQuaternion {
        let m = &r.m;
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            UnitQuaternion {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            UnitQuaternion {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            UnitQuaternion {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            UnitQuaternion {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        let n = q.norm();
        UnitQuaternion { w: q.w / n, x: q.x / n, y: q.y / n, z: q.z / n }
    }
}

/// Left multiplication operator: `quat_left(a) * b == a (x) b`.
pub fn quat_left(q: &UnitQuaternion) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right multiplication operator: `quat_right(b) * a == a (x) b`.
pub fn quat_right(q: &UnitQuaternion) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Rigid transform: rotation plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rot: Rotation::identity(), trans: Vector3::zeros() }
    }

    pub fn new(rot: Rotation, trans: Vector3<f64>) -> Self {
        Pose { rot, trans }
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rot: self.rot * rhs.rot,
            trans: self.rot * rhs.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose { rot: rt, trans: -(rt * self.trans) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * *p + self.trans
    }

    /// `self^{-1} * rhs`.
    pub fn relative_to(&self, rhs: &Pose) -> Pose {
        self.inverse().compose(rhs)
    }
}

/// Rotation angle and translation along the screw axis of a rigid motion.
///
/// Both quantities are invariant under a change of the frame expressing the
/// motion (screw congruence).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewInvariants {
    /// Rotation angle in `[0, pi]` (radians).
    pub theta: f64,
    /// Translation along the screw axis (meters).
    pub d: f64,
}

/// Inverse Rodrigues extraction of the screw invariants of a relative pose.
///
/// Fails with `DegenerateScrew` when the rotation angle is below
/// [`SCREW_ANGLE_FLOOR`], where `d` is ill-conditioned as `1/sin(theta)`.
pub fn screw_invariants(rel: &Pose) -> Result<ScrewInvariants, GeometryError> {
    let r = rel.rot.matrix();
    let theta = (((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos();
    if theta < SCREW_ANGLE_FLOOR {
        return Err(GeometryError::DegenerateScrew(theta));
    }
    let axis_vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let d = axis_vee.dot(&rel.trans) / (2.0 * theta.sin());
    Ok(ScrewInvariants { theta, d })
}

/// Skew-symmetric (hat) operator.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Vee operator for an (approximately) skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Right Jacobian of the SO(3) exponential map.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let hat = skew(phi);
    if theta2 < 1e-10 {
        Matrix3::identity() - 0.5 * hat + (1.0 / 6.0) * hat * hat
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() - ((1.0 - theta.cos()) / theta2) * hat
            + ((theta - theta.sin()) / (theta2 * theta)) * hat * hat
    }
}

/// Inverse of the right Jacobian of the SO(3) exponential map.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let hat = skew(phi);
    if theta2 < 1e-10 {
        Matrix3::identity() + 0.5 * hat + (1.0 / 12.0) * hat * hat
    } else {
        let theta = theta2.sqrt();
        let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Matrix3::identity() + 0.5 * hat + c * hat * hat
    }
}

/// Inverse of the left Jacobian: `Jl^{-1}(phi) = Jr^{-1}(phi)^T`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(phi).transpose()
}
