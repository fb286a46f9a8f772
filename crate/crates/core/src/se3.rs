//! Rigid-body motion in SE(3) and its lie algebra se(3).
//!
//! A [`Twist`] is stored as `[v, w]`: translation part first (meters), then
//! the rotation vector (radians). All computations are carried out in `f64`
//! regardless of the precision the network runs in.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the Rodrigues and Jacobian coefficients switch to
/// their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log_map` refuses rotations whose angle is closer than this to pi.
pub const DEGENERATE_ANGLE_MARGIN: f64 = 1e-6;

/// Tolerance on orthogonality and unit determinant of a pose's rotation block.
pub const POSE_TOLERANCE: f64 = 1e-6;

// The Jacobian coefficients have fifth-power denominators, so they need a much
// wider Taylor band than exp/log.
const JACOBIAN_TAYLOR_ANGLE: f64 = 1e-2;

/// Lie-algebra coordinates of a rigid motion, ordered `[v, w]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(Vector6<f64>);

impl Twist {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_vector(v: Vector6<f64>) -> Self {
        Twist(v)
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Twist(Vector6::from_column_slice(&a))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "twist needs 6 components, got {}",
                values.len()
            )));
        }
        Ok(Twist(Vector6::from_column_slice(values)))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; 6] {
        let mut a = [0.0; 6];
        a.copy_from_slice(self.0.as_slice());
        a
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// The 4x4 matrix form of the twist.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.rotation()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation());
        m
    }
}

impl From<Vector6<f64>> for Twist {
    fn from(v: Vector6<f64>) -> Self {
        Twist(v)
    }
}

/// A rigid transformation as a 4x4 homogeneous matrix.
///
/// Construction validates the affine bottom row and the rotation block, so
/// every `Pose` in circulation satisfies the group invariants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        validate(&m)?;
        Ok(Pose(m))
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Pose::from_matrix(assemble(&rotation, &translation))
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose(assemble(&Matrix3::identity(), &t))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose(assemble(&rt, &(-rt * self.translation())))
    }

    /// Motion from `self` to `other`, `inverse(self) * other`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Rotation angle of the pose in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation())
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(t: &Pose) -> Pose {
    t.inverse()
}

/// `inverse(ti) * tj`.
pub fn relative(ti: &Pose, tj: &Pose) -> Pose {
    ti.relative_to(tj)
}

fn assemble(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

fn validate(m: &Matrix4<f64>) -> Result<()> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("pose has non-finite entries".into()));
    }
    if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
        return Err(Error::InvalidArgument(
            "pose bottom row must be exactly (0, 0, 0, 1)".into(),
        ));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    if ortho > POSE_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "rotation block is not orthogonal (|R^T R - I| = {ortho:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > POSE_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "rotation block determinant is {det}, expected 1"
        )));
    }
    Ok(())
}

/// Skew-symmetric matrix such that `hat(w) * x == w.cross(x)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee_antisymmetric(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// `sin(t)/t`, `(1 - cos t)/t^2` and `(t - sin t)/t^3`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let half_sin = (0.5 * theta).sin();
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            2.0 * half_sin * half_sin / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Left Jacobian of SO(3); also the matrix mapping `v` to the translation of
/// `exp([v, w])`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (_, b, c) = rodrigues_coefficients(theta);
    let omega = hat(w);
    Matrix3::identity() + b * omega + c * omega * omega
}

fn so3_left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let omega = hat(w);
    Matrix3::identity() - 0.5 * omega + d * omega * omega
}

/// Closed-form SE(3) exponential.
pub fn exp_map(xi: &Twist) -> Result<Pose> {
    if !xi.is_finite() {
        return Err(Error::InvalidArgument("twist has non-finite entries".into()));
    }
    let w = xi.rotation();
    let theta = w.norm();
    let (a, b, _) = rodrigues_coefficients(theta);
    let omega = hat(&w);
    let r = Matrix3::identity() + a * omega + b * omega * omega;
    let t = so3_left_jacobian(&w) * xi.translation();
    Ok(Pose(assemble(&r, &t)))
}

/// Closed-form SE(3) logarithm.
///
/// Rotations within [`DEGENERATE_ANGLE_MARGIN`] of pi have no unique
/// logarithm and are rejected.
pub fn log_map(pose: &Pose) -> Result<Twist> {
    validate(&pose.0)?;
    let r = pose.rotation();
    let a = 0.5 * vee_antisymmetric(&r);
    let s = a.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if std::f64::consts::PI - theta < DEGENERATE_ANGLE_MARGIN {
        return Err(Error::DegenerateRotation {
            angle: theta,
            margin: DEGENERATE_ANGLE_MARGIN,
        });
    }
    let w = if theta < SMALL_ANGLE {
        a * (1.0 + theta * theta / 6.0)
    } else {
        a * (theta / s)
    };
    let v = so3_left_jacobian_inverse(&w) * pose.translation();
    Ok(Twist::new(v, w))
}

/// Left Jacobian of SE(3) in `[v, w]` ordering:
/// `exp(xi + d) ~= exp(J(xi) d) * exp(xi)` for small `d`.
pub fn left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let w = xi.rotation();
    let j = so3_left_jacobian(&w);
    let q = translation_coupling(&xi.translation(), &w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Inverse of [`left_jacobian`], computed blockwise.
pub fn left_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    let w = xi.rotation();
    let j_inv = so3_left_jacobian_inverse(&w);
    let q = translation_coupling(&xi.translation(), &w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-j_inv * q * j_inv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

// Upper-right block of the SE(3) left Jacobian.
fn translation_coupling(v: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < JACOBIAN_TAYLOR_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let vx = hat(v);
    let wx = hat(w);
    let wv = wx * vx;
    let vw = vx * wx;
    let wvw = wv * wx;
    0.5 * vx
        + c1 * (wv + vw + wvw)
        + c2 * (wx * wv + vw * wx - 3.0 * wvw)
        + c3 * (wvw * wx + wx * wvw)
}
