//! Normal-aligned parabolic quadric surfaces.
//!
//! A quadric is parameterized by `gamma = {theta_x, theta_y, t_z, a, b, c}`
//! and anchored at a 3D point `p`. Points `q` near the anchor satisfy
//! `v^T E^T F E v = 0` with `v = (q - p, 1)`, where `E` rotates the
//! anchor-relative coordinate into the quadric's local frame (plus a `t_z`
//! offset along local z) and `F` encodes the parabolic height function
//! `z = (a x^2 + 2 b x y + c y^2) / 2`. The upper-left 2x2 of `F` is half the
//! second fundamental form, so the principal curvatures are the eigenvalues
//! of `[[a, b], [b, c]]`.
//!
//! Sign convention: local +z points away from the sensor (opposite the
//! camera-facing normal), so surfaces convex toward the camera get positive
//! curvature.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Matrix6, Point3, Vector3, Vector4, Vector6};

use crate::damping::{Damping, MAX_RETRIES};
use crate::error::{Error, Result};
use crate::icp::SolverConfig;
use crate::joint::{fair_weight, fit_fair_scale};
use crate::{real, Real};

/// Principal curvature pair with `k1 >= k2`, in 1/meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvaturePair<T: Real> {
    pub k1: T,
    pub k2: T,
}

/// Six-parameter parabolic quadric anchored at a 3D point.
#[derive(Debug, Clone, Copy)]
pub struct Quadric<T: Real> {
    /// Rotation of the anchor-relative frame about x, radians, in [-pi, pi].
    pub theta_x: T,
    /// Rotation about y, radians, in [-pi, pi].
    pub theta_y: T,
    /// Offset of the quadric frame along local z, meters.
    pub t_z: T,
    /// Second-fundamental-form coefficients, 1/meters.
    pub a: T,
    pub b: T,
    pub c: T,
    anchor: Point3<T>,
}

fn wrap_angle<T: Real>(theta: T) -> T {
    let pi = T::pi();
    let two_pi = pi + pi;
    let mut t = theta;
    while t > pi {
        t -= two_pi;
    }
    while t < -pi {
        t += two_pi;
    }
    t
}

impl<T: Real> Quadric<T> {
    pub fn new(anchor: Point3<T>, theta_x: T, theta_y: T, t_z: T, a: T, b: T, c: T) -> Self {
        Self {
            theta_x: wrap_angle(theta_x),
            theta_y: wrap_angle(theta_y),
            t_z,
            a,
            b,
            c,
            anchor,
        }
    }

    /// Zero-curvature plane quadric whose local +z axis points opposite the
    /// given camera-facing unit normal.
    pub fn aligned_to_normal(anchor: Point3<T>, camera_facing_normal: &Vector3<T>) -> Self {
        let m = -camera_facing_normal;
        let h = (m.x * m.x + m.z * m.z).sqrt();
        let theta_y = (-m.x).atan2(m.z);
        let theta_x = m.y.atan2(h);
        Self::new(
            anchor,
            theta_x,
            theta_y,
            T::zero(),
            T::zero(),
            T::zero(),
            T::zero(),
        )
    }

    pub fn anchor(&self) -> &Point3<T> {
        &self.anchor
    }

    pub fn params(&self) -> Vector6<T> {
        Vector6::new(self.theta_x, self.theta_y, self.t_z, self.a, self.b, self.c)
    }

    /// Returns a copy with `delta` added to the parameter vector (angles are
    /// wrapped back into [-pi, pi]).
    pub fn apply_delta(&self, delta: &Vector6<T>) -> Self {
        Self::new(
            self.anchor,
            self.theta_x + delta[0],
            self.theta_y + delta[1],
            self.t_z + delta[2],
            self.a + delta[3],
            self.b + delta[4],
            self.c + delta[5],
        )
    }

    /// `R(theta_x, theta_y) = Rx(theta_x) * Ry(theta_y)`.
    pub fn rotation(&self) -> Matrix3<T> {
        rot_x(self.theta_x) * rot_y(self.theta_y)
    }

    /// The alignment block matrix `E`: rotation plus a z offset.
    pub fn e_matrix(&self) -> Matrix4<T> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        e[(2, 3)] = self.t_z;
        e
    }

    /// The parabolic form matrix `F` for coefficients `(a, b, c)`.
    pub fn f_matrix(a: T, b: T, c: T) -> Matrix4<T> {
        let half = real::<T>(0.5);
        let mut f = Matrix4::zeros();
        f[(0, 0)] = a * half;
        f[(0, 1)] = b * half;
        f[(1, 0)] = b * half;
        f[(1, 1)] = c * half;
        f[(2, 3)] = -half;
        f[(3, 2)] = -half;
        f
    }

    /// `Q = E^T F E`, acting on anchor-relative homogeneous coordinates.
    pub fn q_matrix(&self) -> Matrix4<T> {
        let e = self.e_matrix();
        let f = Self::f_matrix(self.a, self.b, self.c);
        e.transpose() * f * e
    }

    /// `Q` conjugated with the anchor translation so it acts directly on
    /// points expressed in the anchor's (reference) frame.
    pub fn anchored_q_matrix(&self) -> Matrix4<T> {
        let c = self.centering_matrix();
        c.transpose() * self.q_matrix() * c
    }

    fn centering_matrix(&self) -> Matrix4<T> {
        let mut c = Matrix4::identity();
        c[(0, 3)] = -self.anchor.x;
        c[(1, 3)] = -self.anchor.y;
        c[(2, 3)] = -self.anchor.z;
        c
    }

    fn center(&self, point: &Vector4<T>) -> Vector4<T> {
        Vector4::new(
            point.x - self.anchor.x * point.w,
            point.y - self.anchor.y * point.w,
            point.z - self.anchor.z * point.w,
            point.w,
        )
    }

    /// Algebraic residual of a homogeneous point expressed in the same frame
    /// as the anchor; zero iff the point lies on the quadric surface.
    pub fn residual(&self, point: &Vector4<T>) -> T {
        let v = self.center(point);
        let local = self.e_matrix() * v;
        let f = Self::f_matrix(self.a, self.b, self.c);
        (local.transpose() * f * local)[(0, 0)]
    }

    /// Principal curvatures extracted from `(a, b, c)`:
    /// `t1 = (a + c)/2`, `t2 = sqrt(t1^2 - a c + b^2)`, `k = t1 +- t2`.
    /// The radicand is clamped at zero (analytically it never goes negative).
    pub fn principal_curvatures(&self) -> CurvaturePair<T> {
        let half = real::<T>(0.5);
        let t1 = (self.a + self.c) * half;
        let t2 = (t1 * t1 - self.a * self.c + self.b * self.b)
            .max(T::zero())
            .sqrt();
        CurvaturePair {
            k1: t1 + t2,
            k2: t1 - t2,
        }
    }

    /// Direction of the quadric's local +z axis in the anchor's frame.
    pub fn local_z_axis(&self) -> Vector3<T> {
        self.rotation().transpose() * Vector3::z()
    }

    /// The same surface can be written with the local frame flipped
    /// (`theta_x + pi`, negated offset and curvature coefficients). This
    /// returns the representative whose local +z has non-negative dot product
    /// with `direction`, fixing the curvature sign convention regardless of
    /// the path an iterative fit took to the surface.
    pub fn oriented_along(&self, direction: &Vector3<T>) -> Self {
        if self.local_z_axis().dot(direction) >= T::zero() {
            *self
        } else {
            Self::new(
                self.anchor,
                self.theta_x + T::pi(),
                self.theta_y,
                -self.t_z,
                -self.a,
                self.b,
                -self.c,
            )
        }
    }

    pub(crate) fn frame(&self) -> QuadricFrame<T> {
        QuadricFrame {
            anchor: self.anchor,
            rot: self.rotation(),
            t_z: self.t_z,
            a: self.a,
            b: self.b,
            c: self.c,
            drx: drot_x(self.theta_x) * rot_y(self.theta_y),
            dry: rot_x(self.theta_x) * drot_y(self.theta_y),
        }
    }

    /// Analytic row of partial derivatives of [`Quadric::residual`] with
    /// respect to each parameter, in `{theta_x, theta_y, t_z, a, b, c}` order.
    pub fn param_jacobian(&self, point: &Vector4<T>) -> Vector6<T> {
        let v = self.center(point);
        let e = self.e_matrix();
        let local = e * v;
        let f = Self::f_matrix(self.a, self.b, self.c);
        let f_local = f * local;
        let two = real::<T>(2.0);
        let half = real::<T>(0.5);

        // d/d{a,b,c}: local^T (dF/dp) local.
        let d_a = local.x * local.x * half;
        let d_b = local.x * local.y;
        let d_c = local.y * local.y * half;

        // d/d{theta_x, theta_y}: 2 (dE/dtheta v)^T F (E v), rotation block only.
        let v3 = Vector3::new(v.x, v.y, v.z);
        let du_x = drot_x(self.theta_x) * rot_y(self.theta_y) * v3;
        let du_y = rot_x(self.theta_x) * drot_y(self.theta_y) * v3;
        let d_theta_x = two * (du_x.x * f_local.x + du_x.y * f_local.y + du_x.z * f_local.z);
        let d_theta_y = two * (du_y.x * f_local.x + du_y.y * f_local.y + du_y.z * f_local.z);

        // d/dt_z: 2 (0,0,w,0)^T F local = -w * local.w.
        let d_t_z = two * v.w * f_local.z;

        Vector6::new(d_theta_x, d_theta_y, d_t_z, d_a, d_b, d_c)
    }
}

/// Precomputed per-quadric matrices for fast residual/Jacobian evaluation
/// in solver inner loops; equivalent to [`Quadric::residual`] and
/// [`Quadric::param_jacobian`].
#[derive(Debug, Clone)]
pub(crate) struct QuadricFrame<T: Real> {
    anchor: Point3<T>,
    rot: Matrix3<T>,
    t_z: T,
    a: T,
    b: T,
    c: T,
    /// d(Rx)/dtheta_x * Ry
    drx: Matrix3<T>,
    /// Rx * d(Ry)/dtheta_y
    dry: Matrix3<T>,
}

impl<T: Real> QuadricFrame<T> {
    /// Residual and parameter Jacobian at an anchor-frame homogeneous point.
    #[inline]
    pub fn residual_jacobian(&self, p: &Vector4<T>) -> (T, Vector6<T>) {
        let (eps, l, v3) = self.residual_parts(p);
        let two = real::<T>(2.0);
        let half = real::<T>(0.5);
        // F * local, first three components.
        let fx = (self.a * l.x + self.b * l.y) * half;
        let fy = (self.b * l.x + self.c * l.y) * half;
        let fz = -p.w * half;
        let du_x = self.drx * v3;
        let du_y = self.dry * v3;
        let j = Vector6::new(
            two * (du_x.x * fx + du_x.y * fy + du_x.z * fz),
            two * (du_y.x * fx + du_y.y * fy + du_y.z * fz),
            -p.w * p.w,
            l.x * l.x * half,
            l.x * l.y,
            l.y * l.y * half,
        );
        (eps, j)
    }

    #[inline]
    pub fn residual(&self, p: &Vector4<T>) -> T {
        self.residual_parts(p).0
    }

    #[inline]
    fn residual_parts(&self, p: &Vector4<T>) -> (T, Vector3<T>, Vector3<T>) {
        let v3 = Vector3::new(
            p.x - self.anchor.x * p.w,
            p.y - self.anchor.y * p.w,
            p.z - self.anchor.z * p.w,
        );
        let mut l = self.rot * v3;
        l.z += self.t_z * p.w;
        let half = real::<T>(0.5);
        let eps =
            (self.a * l.x * l.x + self.c * l.y * l.y) * half + self.b * l.x * l.y - l.z * p.w;
        (eps, l, v3)
    }
}

fn rot_x<T: Real>(t: T) -> Matrix3<T> {
    let (s, c) = (t.sin(), t.cos());
    let (zero, one) = (T::zero(), T::one());
    Matrix3::new(one, zero, zero, zero, c, -s, zero, s, c)
}

fn rot_y<T: Real>(t: T) -> Matrix3<T> {
    let (s, c) = (t.sin(), t.cos());
    let (zero, one) = (T::zero(), T::one());
    Matrix3::new(c, zero, s, zero, one, zero, -s, zero, c)
}

fn drot_x<T: Real>(t: T) -> Matrix3<T> {
    let (s, c) = (t.sin(), t.cos());
    let zero = T::zero();
    Matrix3::new(zero, zero, zero, zero, -s, -c, zero, c, -s)
}

fn drot_y<T: Real>(t: T) -> Matrix3<T> {
    let (s, c) = (t.sin(), t.cos());
    let zero = T::zero();
    Matrix3::new(-s, zero, c, zero, zero, zero, -c, zero, -s)
}

/// Points gathered around a quadric anchor, with per-member distances to the
/// center recorded for robust weighting.
#[derive(Debug, Clone)]
pub struct Neighborhood<T: Real> {
    pub center: Point3<T>,
    pub members: Vec<Point3<T>>,
    pub distances: Vec<T>,
}

impl<T: Real> Neighborhood<T> {
    pub fn new(center: Point3<T>, members: Vec<Point3<T>>) -> Self {
        let distances = members.iter().map(|m| (m - center).norm()).collect();
        Self {
            center,
            members,
            distances,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Outcome of an iterative quadric fit.
#[derive(Debug, Clone, Copy)]
pub struct FitReport<T: Real> {
    pub iterations: usize,
    /// Unweighted RMS of the algebraic residuals at the returned parameters.
    pub final_rms: T,
    /// Set when the last accepted step's max-norm fell below `step_tol`.
    pub converged: bool,
}

fn homogeneous<T: Real>(p: &Point3<T>) -> Vector4<T> {
    Vector4::new(p.x, p.y, p.z, T::one())
}

/// Iterative Gauss-Newton quadric fit with fair re-weighting and Levenberg
/// damping; the damped step never increases the iteration's weighted cost.
pub fn fit_quadric_iterative<T: Real>(
    nb: &Neighborhood<T>,
    init: &Quadric<T>,
    config: &SolverConfig,
) -> Result<(Quadric<T>, FitReport<T>)> {
    config.validate()?;
    if nb.len() < 6 {
        return Err(Error::InsufficientOverlap {
            found: nb.len(),
            required: 6,
        });
    }

    let points: Vec<Vector4<T>> = nb.members.iter().map(homogeneous).collect();
    let mut q = *init;

    let init_residuals: Vec<T> = points.iter().map(|p| q.residual(p)).collect();
    let scale = fit_fair_scale(config, &init_residuals, &nb.distances);

    let mut damping = Damping::new();
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..config.max_iterations {
        let frame = q.frame();
        let rows: Vec<(T, Vector6<T>)> =
            points.iter().map(|p| frame.residual_jacobian(p)).collect();
        let weights: Vec<T> = rows
            .iter()
            .zip(&nb.distances)
            .map(|((e, _), &d)| fair_weight(*e, d, scale))
            .collect();

        let mut h = Matrix6::<T>::zeros();
        let mut g = Vector6::<T>::zeros();
        let mut cost = T::zero();
        for ((e, j), &w) in rows.iter().zip(&weights) {
            h += (*j * j.transpose()) * w;
            g -= *j * (w * *e);
            cost += w * *e * *e;
        }

        if it == 0 {
            let rank = numeric_rank(&h);
            if rank < 6 {
                return Err(Error::DegenerateFit { rank });
            }
        }

        let mut accepted = None;
        let diag_max = h.diagonal().amax();
        for _ in 0..=MAX_RETRIES {
            let lambda: T = real(damping.lambda);
            let mut damped = h;
            for i in 0..6 {
                // Marquardt scaling plus an absolute term so unobservable
                // directions cannot amplify rounding noise into huge steps.
                damped[(i, i)] += h[(i, i)] * lambda + lambda * diag_max;
            }
            let Some(chol) = damped.cholesky() else {
                damping.on_reject();
                continue;
            };
            let delta = chol.solve(&g);
            let candidate = q.apply_delta(&delta);
            let cand_frame = candidate.frame();
            let new_cost = points
                .iter()
                .zip(&weights)
                .map(|(p, &w)| {
                    let e = cand_frame.residual(p);
                    w * e * e
                })
                .fold(T::zero(), |acc, v| acc + v);
            if new_cost <= cost {
                damping.on_accept();
                accepted = Some((candidate, delta));
                break;
            }
            damping.on_reject();
        }

        iterations = it + 1;
        let Some((candidate, delta)) = accepted else {
            break;
        };
        q = candidate;
        if delta.amax() < real(config.step_tol) {
            converged = true;
            break;
        }
    }

    // The parabolic form is sign-degenerate under a frame flip; report the
    // representative on the same side as the initialization.
    q = q.oriented_along(&init.local_z_axis());

    let sum_sq = points
        .iter()
        .map(|p| {
            let e = q.residual(p);
            e * e
        })
        .fold(T::zero(), |acc, v| acc + v);
    let final_rms = (sum_sq / real(nb.len() as f64)).sqrt();

    Ok((
        q,
        FitReport {
            iterations,
            final_rms,
            converged,
        },
    ))
}

/// Numeric rank of a symmetric 6x6 matrix (eigenvalues above
/// `1e-12 * max |eigenvalue|`).
fn numeric_rank<T: Real>(h: &Matrix6<T>) -> usize {
    let eigs = h.symmetric_eigenvalues();
    let max = eigs.amax();
    if max == T::zero() {
        return 0;
    }
    let tol = max * real(1e-12);
    eigs.iter().filter(|l| l.abs() > tol).count()
}

/// Per-pixel principal curvature grid with a validity mask, stored row-major
/// in the frame's pixel order.
#[derive(Debug, Clone)]
pub struct CurvatureMap {
    width: usize,
    height: usize,
    k1: Vec<f64>,
    k2: Vec<f64>,
    valid: Vec<bool>,
}

const CURVATURE_MAGIC: &[u8; 4] = b"CMAP";

impl CurvatureMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            k1: vec![0.0; width * height],
            k2: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn set(&mut self, index: usize, pair: CurvaturePair<f64>) {
        self.k1[index] = pair.k1;
        self.k2[index] = pair.k2;
        self.valid[index] = true;
    }

    pub fn invalidate(&mut self, index: usize) {
        self.valid[index] = false;
    }

    pub fn get(&self, index: usize) -> Option<CurvaturePair<f64>> {
        self.valid[index].then(|| CurvaturePair {
            k1: self.k1[index],
            k2: self.k2[index],
        })
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid[index]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Little-endian binary layout: magic `CMAP`, u32 width, u32 height, then
    /// per pixel f32 k1, f32 k2, u8 valid.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CURVATURE_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for i in 0..self.len() {
            w.write_all(&(self.k1[i] as f32).to_le_bytes())?;
            w.write_all(&(self.k2[i] as f32).to_le_bytes())?;
            w.write_all(&[u8::from(self.valid[i])])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CURVATURE_MAGIC {
            return Err(Error::format("curvature map", "bad magic"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let width = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let height = u32::from_le_bytes(buf4) as usize;
        let mut out = Self::new_invalid(width, height);
        let mut rec = [0u8; 9];
        for i in 0..width * height {
            r.read_exact(&mut rec)?;
            out.k1[i] = f32::from_le_bytes(rec[0..4].try_into().unwrap()) as f64;
            out.k2[i] = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
            out.valid[i] = rec[8] != 0;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(file))
    }

    /// CSV rows `k1,k2,valid` in row-major pixel order, preceded by a
    /// `width,height` header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},{}", self.width, self.height)?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{}", self.k1[i], self.k2[i], u8::from(self.valid[i]))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("curvature csv", "empty file"))??;
        let dims: Vec<usize> = header
            .trim()
            .split(',')
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::format("curvature csv", "bad header"))
            })
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::format("curvature csv", "bad header"));
        }
        let mut out = Self::new_invalid(dims[0], dims[1]);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if i >= out.len() {
                return Err(Error::format("curvature csv", "too many rows"));
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 3 {
                return Err(Error::format("curvature csv", "expected 3 columns"));
            }
            out.k1[i] = fields[0]
                .parse()
                .map_err(|_| Error::format("curvature csv", "bad k1"))?;
            out.k2[i] = fields[1]
                .parse()
                .map_err(|_| Error::format("curvature csv", "bad k2"))?;
            out.valid[i] = fields[2].trim() != "0";
        }
        Ok(out)
    }
}
