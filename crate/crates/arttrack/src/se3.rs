//! SE(3) / se(3) arithmetic: exponential and logarithm maps, composition,
//! inversion, point action and twist accumulation.
//!
//! A [`Pose`] is a rigid transform (orthonormal rotation + translation);
//! a [`Twist`] is its tangent-space representation `(omega, v)`. The
//! exponential map uses the closed axis-angle form with the left Jacobian
//! acting on the translational part, switching to series expansions for
//! small angles. The logarithm is single-valued for rotation angles below
//! `pi` and reports [`Se3Error::AngleNearPi`] inside the branch-ambiguous
//! band instead of guessing.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Rotation angle threshold below which series expansions are used.
///
/// The closed-form coefficients contain `(1 - cos t)/t^2` which loses all
/// precision long before the spec-mandated 1e-8 cutover, so the series
/// branch is taken for any angle below 1e-4.
const SMALL_ANGLE: f64 = 1e-4;

/// Width of the branch-ambiguity band around `pi` for the logarithm.
const NEAR_PI_BAND: f64 = 1e-6;

/// Orthonormality drift above which a rotation is re-projected.
const ORTHO_DRIFT: f64 = 1e-12;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum Se3Error {
    /// Rotation angle within 1e-6 of pi: the logarithm branch is
    /// ambiguous and the caller decides the fallback.
    #[error("rotation angle within {NEAR_PI_BAND:e} of pi; log branch ambiguous")]
    AngleNearPi,
}

/// Element of se(3): angular part `omega` (axis * angle, radians) and
/// linear part `v` (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// True when the angular part is inside the canonical range
    /// `|omega| < pi` where the exp/log pair is one-to-one.
    pub fn is_canonical(&self) -> bool {
        self.omega.norm() < std::f64::consts::PI
    }

    /// Componentwise twist accumulation `xi_t = xi_{t-1} + delta`.
    ///
    /// This is the additive bookkeeping used by the tracker; it is not the
    /// group composition (`exp(a + b) != exp(a) * exp(b)` in general), so
    /// the tracker stores the composed [`Pose`] alongside it.
    pub fn accumulate(&self, inc: &Twist) -> Twist {
        Twist::new(self.omega + inc.omega, self.v + inc.v)
    }

    /// Max-norm over all six components.
    pub fn norm_inf(&self) -> f64 {
        self.omega.amax().max(self.v.amax())
    }

    /// Combined magnitude: rotation angle plus translation length.
    pub fn magnitude(&self) -> f64 {
        self.omega.norm() + self.v.norm()
    }

    /// The 4x4 matrix form: `[[omega]_x, v; 0, 0]`.
    pub fn hat(&self) -> Matrix4<f64> {
        let w = skew(&self.omega);
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        self.accumulate(&rhs)
    }
}

/// Rigid transform on SE(3).
///
/// The rotation is kept orthonormal: constructors and [`Pose::compose`]
/// re-project via polar decomposition whenever drift exceeds 1e-12.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from rotation and translation, repairing small orthonormality
    /// drift by polar projection.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if ortho_drift(&rotation) > ORTHO_DRIFT {
            polar_project(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` about the unit axis through `point`.
    pub fn rotation_about_axis(point: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Self {
        let r = rotation_from_axis_angle(&(axis.normalize() * angle));
        let t = point - r * point;
        Self::new(r, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// 4x4 homogeneous matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exponential map se(3) -> SE(3).
    ///
    /// Closed form via axis-angle for the rotation and the left Jacobian
    /// for the translation; series expansion below [`SMALL_ANGLE`]. Total
    /// on finite input.
    pub fn exp(xi: &Twist) -> Self {
        let theta = xi.omega.norm();
        let w = skew(&xi.omega);
        let w2 = w * w;
        let (a, b, c) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (
                1.0 - t2 / 6.0 * (1.0 - t2 / 20.0),
                0.5 * (1.0 - t2 / 12.0 * (1.0 - t2 / 30.0)),
                (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)) / 6.0,
            )
        } else {
            let t2 = theta * theta;
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };
        let rotation = Matrix3::identity() + w * a + w2 * b;
        let jac = Matrix3::identity() + w * b + w2 * c;
        Pose::new(rotation, jac * xi.v)
    }

    /// Logarithm map SE(3) -> se(3), canonical branch.
    ///
    /// Errors with [`Se3Error::AngleNearPi`] when the rotation angle is
    /// within 1e-6 of pi.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let theta = self.angle();
        if theta > std::f64::consts::PI - NEAR_PI_BAND {
            return Err(Se3Error::AngleNearPi);
        }
        let anti = vee(&(self.rotation - self.rotation.transpose())) * 0.5;
        let omega = if theta < SMALL_ANGLE {
            // anti = sin(theta) * axis; sin(theta)/theta ~ 1 - t^2/6
            anti * (1.0 + theta * theta / 6.0)
        } else {
            anti * (theta / theta.sin())
        };
        let w = skew(&omega);
        let w2 = w * w;
        let k = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 + t2 / 60.0) / 12.0
        } else {
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / (theta * theta);
            (1.0 - a / (2.0 * b)) / (theta * theta)
        };
        let jac_inv = Matrix3::identity() - w * 0.5 + w2 * k;
        Ok(Twist::new(omega, jac_inv * self.translation))
    }

    /// Group composition `a * b` (this pose applied after `b`).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Action on a point: `R x + t`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation-only action (directions, normals).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

/// Per-axis scale; all components strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale(Vector3<f64>);

impl Scale {
    pub fn new(s: Vector3<f64>) -> Option<Self> {
        (s.x > 0.0 && s.y > 0.0 && s.z > 0.0).then_some(Self(s))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Skew-symmetric matrix of `w` (the hat operator on so(3)).
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`skew`]; assumes the argument is skew-symmetric.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn rotation_from_axis_angle(omega: &Vector3<f64>) -> Matrix3<f64> {
    Pose::exp(&Twist::new(*omega, Vector3::zeros()))
        .rotation()
        .to_owned()
}

fn ortho_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest rotation in Frobenius norm: `U V^T` from the SVD, with a sign
/// fix to keep the determinant positive.
fn polar_project(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut proj = u * vt;
    if proj.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        proj = u * vt;
    }
    proj
}
