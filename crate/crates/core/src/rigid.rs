//! Rigid-motion algebra: homogeneous transforms, the six se(3) generators,
//! the closed-form exponential map and trajectory serialization.
//!
//! Motion parameters are ordered `{theta_x, theta_y, theta_z, t_x, t_y, t_z}`
//! (radians then meters); every Jacobian column ordering in the crate inherits
//! this. Pose updates compose on the left, `T' = exp(sum d_i G_i) * T`, so an
//! increment is expressed in the world/reference frame.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, UnitQuaternion, Vector3, Vector4, Vector6};

use crate::error::{Error, Result};
use crate::{real, Real};

/// Number of compositions after which the rotation block is re-orthonormalized
/// to bound floating-point drift.
const REORTHONORMALIZE_EVERY: u32 = 50;

/// A six-component motion increment `{theta_x, theta_y, theta_z, t_x, t_y, t_z}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector<T: Real> {
    components: Vector6<T>,
}

impl<T: Real> MotionVector<T> {
    pub fn new(components: [T; 6]) -> Self {
        Self {
            components: Vector6::from_row_slice(&components),
        }
    }

    pub fn from_vector(components: Vector6<T>) -> Self {
        Self { components }
    }

    pub fn zeros() -> Self {
        Self {
            components: Vector6::zeros(),
        }
    }

    pub fn as_vector(&self) -> &Vector6<T> {
        &self.components
    }

    /// Rotation part `(theta_x, theta_y, theta_z)`.
    pub fn rotation(&self) -> Vector3<T> {
        Vector3::new(self.components[0], self.components[1], self.components[2])
    }

    /// Translation part `(t_x, t_y, t_z)`.
    pub fn translation(&self) -> Vector3<T> {
        Vector3::new(self.components[3], self.components[4], self.components[5])
    }

    pub fn norm(&self) -> T {
        self.components.norm()
    }

    pub fn max_norm(&self) -> T {
        self.components.amax()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            components: self.components * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }
}

impl<T: Real> std::ops::Neg for MotionVector<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            components: -self.components,
        }
    }
}

impl<T: Real> std::ops::Index<usize> for MotionVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.components[i]
    }
}

/// Returns the constant basis matrix `G_i` of the rigid-motion tangent space,
/// i.e. the derivative of the transform with respect to motion parameter `i`
/// at the identity. Indices follow the `MotionVector` ordering.
pub fn generator<T: Real>(index: usize) -> Result<Matrix4<T>> {
    if index > 5 {
        return Err(Error::InvalidArgument(format!(
            "generator index {index} out of range 0..=5"
        )));
    }
    let one = T::one();
    let mut g = Matrix4::zeros();
    match index {
        0 => {
            g[(1, 2)] = -one;
            g[(2, 1)] = one;
        }
        1 => {
            g[(0, 2)] = one;
            g[(2, 0)] = -one;
        }
        2 => {
            g[(0, 1)] = -one;
            g[(1, 0)] = one;
        }
        i => {
            g[(i - 3, 3)] = one;
        }
    }
    Ok(g)
}

/// Applies generator `index` to a homogeneous column without materializing the
/// matrix. Used in solver inner loops.
#[inline]
pub(crate) fn apply_generator<T: Real>(index: usize, v: &Vector4<T>) -> Vector4<T> {
    let zero = T::zero();
    match index {
        0 => Vector4::new(zero, -v.z, v.y, zero),
        1 => Vector4::new(v.z, zero, -v.x, zero),
        2 => Vector4::new(-v.y, v.x, zero, zero),
        3 => Vector4::new(v.w, zero, zero, zero),
        4 => Vector4::new(zero, v.w, zero, zero),
        _ => Vector4::new(zero, zero, v.w, zero),
    }
}

fn skew<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let zero = T::zero();
    Matrix3::new(zero, -w.z, w.y, w.z, zero, -w.x, -w.y, w.x, zero)
}

/// An element of the rigid-motion group stored as a 4x4 homogeneous matrix.
///
/// Invariants: the rotation block is orthonormal with determinant +1 (within
/// 1e-9 after re-orthonormalization) and the bottom row is exactly
/// `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform<T: Real> {
    matrix: Matrix4<T>,
    /// Compositions since the last re-orthonormalization.
    compositions: u32,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
            compositions: 0,
        }
    }

    /// Builds a transform from rotation and translation blocks, validating and
    /// re-orthonormalizing the rotation.
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let tol: T = real(1e-6);
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).amax();
        if !dev.is_finite() || dev > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation block is not orthonormal (max deviation {dev:?})"
            )));
        }
        if rotation.determinant() < T::zero() {
            return Err(Error::InvalidArgument(
                "rotation block has negative determinant".into(),
            ));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        let mut out = Self::from_parts_unchecked(rotation, translation);
        out.reorthonormalize();
        Ok(out)
    }

    /// Builds a transform from a full homogeneous matrix; the bottom row must
    /// be `(0, 0, 0, 1)` exactly.
    pub fn from_matrix(matrix: Matrix4<T>) -> Result<Self> {
        let bottom = matrix.row(3);
        if bottom[0] != T::zero()
            || bottom[1] != T::zero()
            || bottom[2] != T::zero()
            || bottom[3] != T::one()
        {
            return Err(Error::InvalidArgument(
                "bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        Self::from_parts(
            matrix.fixed_view::<3, 3>(0, 0).into_owned(),
            matrix.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self {
            matrix: m,
            compositions: 0,
        }
    }

    pub fn from_translation(x: T, y: T, z: T) -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), Vector3::new(x, y, z))
    }

    pub fn matrix(&self) -> &Matrix4<T> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<T> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<T> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Geodesic angle of the rotation block, in radians.
    pub fn rotation_angle(&self) -> T {
        let r = self.rotation();
        let c = (r.trace() - T::one()) * real(0.5);
        c.clamp(-T::one(), T::one()).acos()
    }

    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation() * v
    }

    pub fn transform_homogeneous(&self, v: &Vector4<T>) -> Vector4<T> {
        self.matrix * v
    }

    pub fn invert(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Self {
            matrix: Self::from_parts_unchecked(rt, t).matrix,
            compositions: self.compositions,
        }
    }

    /// Left-composed exponential update `exp(sum d_i G_i) * self`.
    pub fn exp_update(&self, delta: &MotionVector<T>) -> Self {
        exp_motion(delta) * *self
    }

    /// Max-norm of the difference between the two homogeneous matrices.
    pub fn max_difference(&self, other: &Self) -> T {
        (self.matrix - other.matrix).amax()
    }

    /// Gram-Schmidt re-orthonormalization of the rotation block; keeps the
    /// determinant positive by construction.
    fn reorthonormalize(&mut self) {
        let r = self.rotation();
        let c0 = r.column(0).normalize();
        let c2 = c0.cross(&r.column(1).into_owned()).normalize();
        let c1 = c2.cross(&c0);
        let fixed = Matrix3::from_columns(&[c0, c1, c2]);
        self.matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
        self.compositions = 0;
    }
}

impl<T: Real> std::ops::Mul for RigidTransform<T> {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        let mut out = Self {
            matrix: self.matrix * rhs.matrix,
            compositions: self.compositions.max(rhs.compositions) + 1,
        };
        // Restore exact affine structure lost to rounding.
        out.matrix[(3, 0)] = T::zero();
        out.matrix[(3, 1)] = T::zero();
        out.matrix[(3, 2)] = T::zero();
        out.matrix[(3, 3)] = T::one();
        if out.compositions >= REORTHONORMALIZE_EVERY {
            out.reorthonormalize();
        }
        out
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Closed-form exponential of a motion vector: Rodrigues for the rotation and
/// the coupled V-matrix for the translation.
pub fn exp_motion<T: Real>(delta: &MotionVector<T>) -> RigidTransform<T> {
    assert!(delta.is_finite(), "motion vector must be finite");
    let w = delta.rotation();
    let v = delta.translation();
    let theta2 = w.norm_squared();
    let k = skew(&w);
    let k2 = k * k;

    let (a, b, c) = if theta2 < real::<T>(1e-10) {
        // Series expansions of sin(t)/t, (1-cos(t))/t^2, (t-sin(t))/t^3.
        let half = real::<T>(0.5);
        (
            T::one() - theta2 * real(1.0 / 6.0),
            half - theta2 * real(1.0 / 24.0),
            real::<T>(1.0 / 6.0) - theta2 * real(1.0 / 120.0),
        )
    } else {
        let theta = theta2.sqrt();
        (
            theta.sin() / theta,
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };

    let rot = Matrix3::identity() + k * a + k2 * b;
    let vmat = Matrix3::identity() + k * b + k2 * c;
    let mut out = RigidTransform::from_parts_unchecked(rot, vmat * v);
    out.reorthonormalize();
    out
}

/// Writes one pose per line: `frame_index tx ty tz qx qy qz qw`
/// (quaternion scalar-last, whitespace-separated decimal text).
pub fn write_trajectory<W: Write>(mut w: W, poses: &[RigidTransform<f64>]) -> Result<()> {
    for (i, pose) in poses.iter().enumerate() {
        let t = pose.translation();
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            pose.rotation(),
        ));
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            i, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

/// Reads a trajectory written by [`write_trajectory`]. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_trajectory<R: BufRead>(r: R) -> Result<Vec<RigidTransform<f64>>> {
    let mut poses = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::format(
                        format!("trajectory line {}", lineno + 1),
                        format!("bad number '{tok}'"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != 8 {
            return Err(Error::format(
                format!("trajectory line {}", lineno + 1),
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            fields[7], fields[4], fields[5], fields[6],
        ));
        poses.push(RigidTransform::from_parts(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(fields[1], fields[2], fields[3]),
        )?);
    }
    Ok(poses)
}
