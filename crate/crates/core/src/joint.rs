//! Joint pose + quadric optimization.
//!
//! A set of quadrics anchored in the reference surface S1 is optimized
//! together with the camera-to-reference poses of the remaining surfaces.
//! Each residual couples one pose and one quadric:
//! `eps = q' T_j^T Q(gamma_p) T_j q'` for a point `q'` gathered around the
//! anchor transformed into frame j. The Gauss-Newton Hessian therefore has
//! block-diagonal pose and quadric parts joined by a sparse coupling block,
//! which the `schur` module solves without forming the full matrix.
//!
//! Three drivers share the engine: a two-frame refiner, the multi-frame
//! optimizer, and a pose-only variant that keeps the quadrics fixed.

use nalgebra::{Matrix4, Matrix6, Vector4, Vector6};
use rayon::prelude::*;

use crate::damping::{CostStep, Damping, MAX_RETRIES};
use crate::error::{Error, Result};
use crate::icp::SolverConfig;
use crate::quadric::{CurvatureMap, Quadric};
use crate::rigid::{apply_generator, MotionVector, RigidTransform};
use crate::schur::{solve_schur, BlockSystem};
use crate::surface::Surface;
use crate::{real, Real};

/// Modified fair weight `n^2 / (n^2 + residual^2 + distance^2)`, in (0, 1];
/// exactly 1 when both the residual and the distance are zero.
pub fn fair_weight<T: Real>(residual: T, distance: T, n: T) -> T {
    let n2 = n * n;
    n2 / (n2 + residual * residual + distance * distance)
}

/// Absolute floor for the data-driven fair scale, meters: the order of a
/// typical good-correspondence error for a depth sensor. Without it a
/// noiseless residual median collapses the scale and crushes legitimately
/// curved regions.
pub(crate) const FAIR_SCALE_FLOOR: f64 = 1e-5;

/// Resolves the fair scale `n`: the configured value if set, otherwise
/// `max(2 * median |residual|, 1e-5)` from the data at solver start.
pub(crate) fn resolve_fair_scale<T: Real>(config: &SolverConfig, residuals: &[T]) -> T {
    if let Some(n) = config.fair_scale {
        return real(n);
    }
    (real::<T>(2.0) * median_abs(residuals)).max(real(FAIR_SCALE_FLOOR))
}

/// Fair scale for the single-frame quadric fit: adds a term of half the
/// median member distance so the distance taper stays a window, not a spike,
/// on noiseless data.
pub(crate) fn fit_fair_scale<T: Real>(
    config: &SolverConfig,
    residuals: &[T],
    distances: &[T],
) -> T {
    if let Some(n) = config.fair_scale {
        return real(n);
    }
    (real::<T>(2.0) * median_abs(residuals))
        .max(median_abs(distances) * real(0.5))
        .max(real(FAIR_SCALE_FLOOR))
}

fn median_abs<T: Real>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    let mut v: Vec<T> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v[v.len() / 2]
}

/// Residual of a point expressed in surface S_j's frame against a
/// reference-frame quadric: the point is carried into the reference frame by
/// `T_j` and evaluated against the anchored quadric matrix.
pub fn joint_residual<T: Real>(
    q: &Quadric<T>,
    pose: &RigidTransform<T>,
    point: &Vector4<T>,
) -> T {
    q.residual(&pose.transform_homogeneous(point))
}

#[inline]
fn motion_jacobian_from<T: Real>(anchored_q: &Matrix4<T>, w: &Vector4<T>) -> Vector6<T> {
    let y = anchored_q * w;
    let two = real::<T>(2.0);
    Vector6::from_fn(|i, _| two * y.dot(&apply_generator(i, w)))
}

/// Six partials of [`joint_residual`] with respect to the motion parameters
/// of `pose`, for a left-multiplicative increment: by symmetry of `Q` the two
/// product-rule terms are equal, giving `2 w^T Q G_i w` with `w = T_j q`.
pub fn motion_jacobian<T: Real>(
    q: &Quadric<T>,
    pose: &RigidTransform<T>,
    point: &Vector4<T>,
) -> Vector6<T> {
    let w = pose.transform_homogeneous(point);
    motion_jacobian_from(&q.anchored_q_matrix(), &w)
}

/// Neighbourhood radius as a linear function of the center's depth,
/// `radius = scale_per_meter * z`; distance-proportional sensor noise
/// motivates distance-proportional support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusPolicy {
    pub scale_per_meter: f64,
}

impl RadiusPolicy {
    pub fn new(scale_per_meter: f64) -> Self {
        Self { scale_per_meter }
    }

    pub fn radius(&self, z: f64) -> f64 {
        self.scale_per_meter * z
    }
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        // 25 mm of support at 2 m.
        Self::new(0.0125)
    }
}

/// Result of a joint solve: refined poses, the curvature map over S1, and the
/// per-iteration cost trace (weighted cost before/after each damped step).
#[derive(Debug, Clone)]
pub struct JointResult {
    pub poses: Vec<RigidTransform<f64>>,
    pub quadrics: Vec<Quadric<f64>>,
    pub curvature: CurvatureMap,
    pub cost_trace: Vec<CostStep>,
    pub converged: bool,
    /// The fair scale used (configured or data-driven).
    pub fair_scale: f64,
}

/// Result of the pose-only variant (quadrics held fixed).
#[derive(Debug, Clone)]
pub struct QFullResult {
    pub poses: Vec<RigidTransform<f64>>,
    pub cost_trace: Vec<CostStep>,
    pub converged: bool,
    pub fair_scale: f64,
}

/// A joint optimization problem: M surfaces with camera-to-reference poses
/// (pose 0 pinned to the identity as the gauge) and N quadrics anchored at
/// points of S1.
pub struct JointProblem<'a> {
    surfaces: Vec<&'a Surface>,
    init_poses: Vec<RigidTransform<f64>>,
    init_quadrics: Vec<Quadric<f64>>,
    radius: RadiusPolicy,
    config: SolverConfig,
}

impl<'a> JointProblem<'a> {
    pub fn new(
        surfaces: Vec<&'a Surface>,
        init_poses: Vec<RigidTransform<f64>>,
        init_quadrics: Vec<Quadric<f64>>,
        config: SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        if surfaces.len() < 2 {
            return Err(Error::InvalidArgument(
                "joint optimization needs at least 2 surfaces".into(),
            ));
        }
        if surfaces.len() != init_poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} surfaces but {} poses",
                surfaces.len(),
                init_poses.len()
            )));
        }
        if init_poses[0].max_difference(&RigidTransform::identity()) > 1e-12 {
            return Err(Error::GaugeViolation);
        }
        if init_quadrics.is_empty() {
            return Err(Error::InvalidArgument("no quadrics supplied".into()));
        }
        Ok(Self {
            surfaces,
            init_poses,
            init_quadrics,
            radius: RadiusPolicy::default(),
            config,
        })
    }

    pub fn with_radius_policy(mut self, radius: RadiusPolicy) -> Self {
        self.radius = radius;
        self
    }

    /// Joint optimization over all free poses and all quadrics.
    pub fn solve(&self) -> Result<JointResult> {
        let out = run_engine(
            &self.surfaces,
            &self.init_poses,
            &self.init_quadrics,
            &self.config,
            self.radius,
            true,
        )?;
        let curvature = curvature_map(self.surfaces[0], &out.quadrics, &out.frozen);
        Ok(JointResult {
            poses: out.poses,
            quadrics: out.quadrics,
            curvature,
            cost_trace: out.trace,
            converged: out.converged,
            fair_scale: out.fair_scale,
        })
    }

    /// Pose-only optimization with quadric parameters held constant.
    pub fn solve_poses_only(&self) -> Result<QFullResult> {
        let out = run_engine(
            &self.surfaces,
            &self.init_poses,
            &self.init_quadrics,
            &self.config,
            self.radius,
            false,
        )?;
        Ok(QFullResult {
            poses: out.poses,
            cost_trace: out.trace,
            converged: out.converged,
            fair_scale: out.fair_scale,
        })
    }
}

/// Two-frame joint refinement: one free pose (S2 into S1) plus the quadrics
/// of S1, seeded from the single-frame fits and a tracker/ICP pose estimate.
pub fn solve_joint_ftf(
    s1: &Surface,
    s2: &Surface,
    init_pose: &RigidTransform<f64>,
    init_quadrics: &[Quadric<f64>],
    config: &SolverConfig,
) -> Result<JointResult> {
    JointProblem::new(
        vec![s1, s2],
        vec![RigidTransform::identity(), *init_pose],
        init_quadrics.to_vec(),
        *config,
    )?
    .solve()
}

/// Multi-frame joint optimization over all M-1 free poses and all quadrics.
pub fn solve_joint_full(
    surfaces: &[Surface],
    init_poses: &[RigidTransform<f64>],
    init_quadrics: &[Quadric<f64>],
    config: &SolverConfig,
) -> Result<JointResult> {
    JointProblem::new(
        surfaces.iter().collect(),
        init_poses.to_vec(),
        init_quadrics.to_vec(),
        *config,
    )?
    .solve()
}

/// Pose-only optimization against a constant set of quadrics.
pub fn solve_q_full(
    surfaces: &[Surface],
    init_poses: &[RigidTransform<f64>],
    quadrics: &[Quadric<f64>],
    config: &SolverConfig,
) -> Result<QFullResult> {
    JointProblem::new(
        surfaces.iter().collect(),
        init_poses.to_vec(),
        quadrics.to_vec(),
        *config,
    )?
    .solve_poses_only()
}

struct Row {
    frame: usize,
    /// Homogeneous member point in frame coordinates.
    point: Vector4<f64>,
    weight: f64,
}

struct Contribution {
    c: Matrix6<f64>,
    rhs_q: Vector6<f64>,
    a: Vec<Matrix6<f64>>,
    rhs_a: Vec<Vector6<f64>>,
    b: Vec<Matrix6<f64>>,
    touched: Vec<bool>,
    cost: f64,
    rows: Vec<Row>,
}

struct EngineOutput {
    poses: Vec<RigidTransform<f64>>,
    quadrics: Vec<Quadric<f64>>,
    frozen: Vec<bool>,
    trace: Vec<CostStep>,
    converged: bool,
    fair_scale: f64,
}

fn gather_contribution(
    surfaces: &[&Surface],
    poses: &[RigidTransform<f64>],
    quadric: &Quadric<f64>,
    radius: RadiusPolicy,
    scale: f64,
    collect_jacobians: bool,
) -> Contribution {
    let m = surfaces.len();
    let mut contrib = Contribution {
        c: Matrix6::zeros(),
        rhs_q: Vector6::zeros(),
        a: vec![Matrix6::zeros(); m],
        rhs_a: vec![Vector6::zeros(); m],
        b: vec![Matrix6::zeros(); m],
        touched: vec![false; m],
        cost: 0.0,
        rows: Vec::new(),
    };
    let qmat = quadric.anchored_q_matrix();
    let frame_eval = quadric.frame();
    for frame in 0..m {
        let center = poses[frame].invert().transform_point(quadric.anchor());
        if center.z <= 0.0 {
            continue;
        }
        let r = radius.radius(center.z);
        if r <= 0.0 {
            continue;
        }
        let nb = surfaces[frame].neighborhood(&center, r);
        for (member, &dist) in nb.members.iter().zip(&nb.distances) {
            let p_hom = Vector4::new(member.x, member.y, member.z, 1.0);
            let w4 = poses[frame].transform_homogeneous(&p_hom);
            let (eps, jg) = frame_eval.residual_jacobian(&w4);
            let weight = fair_weight(eps, dist, scale);
            contrib.cost += weight * eps * eps;
            if collect_jacobians {
                contrib.c += (jg * jg.transpose()) * weight;
                contrib.rhs_q -= jg * (weight * eps);
                if frame > 0 {
                    let ja = motion_jacobian_from(&qmat, &w4);
                    contrib.a[frame] += (ja * ja.transpose()) * weight;
                    contrib.rhs_a[frame] -= ja * (weight * eps);
                    contrib.b[frame] += (ja * jg.transpose()) * weight;
                    contrib.touched[frame] = true;
                }
            }
            contrib.rows.push(Row {
                frame,
                point: p_hom,
                weight,
            });
        }
    }
    contrib
}

fn total_candidate_cost(
    contribs: &[Contribution],
    quadrics: &[Quadric<f64>],
    poses: &[RigidTransform<f64>],
) -> f64 {
    let per_quadric: Vec<f64> = contribs
        .par_iter()
        .enumerate()
        .map(|(qi, contrib)| {
            let frame_eval = quadrics[qi].frame();
            contrib
                .rows
                .iter()
                .map(|row| {
                    let w4 = poses[row.frame].transform_homogeneous(&row.point);
                    let eps = frame_eval.residual(&w4);
                    row.weight * eps * eps
                })
                .sum()
        })
        .collect();
    per_quadric.iter().sum()
}

fn run_engine(
    surfaces: &[&Surface],
    init_poses: &[RigidTransform<f64>],
    init_quadrics: &[Quadric<f64>],
    config: &SolverConfig,
    radius: RadiusPolicy,
    optimize_quadrics: bool,
) -> Result<EngineOutput> {
    let m = surfaces.len();
    let n_q = init_quadrics.len();
    let mut poses = init_poses.to_vec();
    let mut quadrics = init_quadrics.to_vec();
    let init_axes: Vec<_> = init_quadrics.iter().map(|q| q.local_z_axis()).collect();

    // Pre-pass: residuals and distances at the initial state resolve the fair
    // scale and check cross-frame support.
    let scale = {
        let pre: Vec<(Vec<f64>, bool)> = quadrics
            .par_iter()
            .map(|q| {
                let frame_eval = q.frame();
                let mut residuals = Vec::new();
                let mut cross = false;
                for frame in 0..m {
                    let center = poses[frame].invert().transform_point(q.anchor());
                    if center.z <= 0.0 {
                        continue;
                    }
                    let r = radius.radius(center.z);
                    if r <= 0.0 {
                        continue;
                    }
                    let nb = surfaces[frame].neighborhood(&center, r);
                    if frame > 0 && !nb.is_empty() {
                        cross = true;
                    }
                    for member in &nb.members {
                        let p_hom = Vector4::new(member.x, member.y, member.z, 1.0);
                        let w4 = poses[frame].transform_homogeneous(&p_hom);
                        residuals.push(frame_eval.residual(&w4));
                    }
                }
                (residuals, cross)
            })
            .collect();
        let cross_count = pre.iter().filter(|(_, c)| *c).count();
        if cross_count < 6 {
            return Err(Error::InsufficientOverlap {
                found: cross_count,
                required: 6,
            });
        }
        let residuals: Vec<f64> = pre.iter().flat_map(|(r, _)| r.iter().copied()).collect();
        resolve_fair_scale(config, &residuals)
    };
    log::debug!("joint solver fair scale: {scale:.6e}");

    let mut damping = Damping::new();
    let mut trace: Vec<CostStep> = Vec::new();
    let mut converged = false;
    let mut frozen_last = vec![false; n_q];

    for _iter in 0..config.max_iterations {
        let contribs: Vec<Contribution> = quadrics
            .par_iter()
            .map(|q| gather_contribution(surfaces, &poses, q, radius, scale, true))
            .collect();
        let cost_before: f64 = {
            let costs: Vec<f64> = contribs.iter().map(|c| c.cost).collect();
            costs.iter().sum()
        };

        // Undamped per-frame pose sums, reused across damping retries.
        let mut pose_a = vec![Matrix6::<f64>::zeros(); m];
        let mut pose_rhs = vec![Vector6::<f64>::zeros(); m];
        for contrib in &contribs {
            for frame in 1..m {
                pose_a[frame] += contrib.a[frame];
                pose_rhs[frame] += contrib.rhs_a[frame];
            }
        }

        let mut accepted = None;
        for _attempt in 0..=MAX_RETRIES {
            let lambda = damping.lambda;
            let mut frozen = vec![false; n_q];
            let solution = loop {
                let (sys, active) =
                    build_system(&contribs, &pose_a, &pose_rhs, m, &frozen, lambda, optimize_quadrics);
                match solve_schur(&sys) {
                    Ok(sol) => break Ok(Some((sol, active))),
                    Err(Error::SingularQuadricBlock { index }) => {
                        frozen[active[index]] = true;
                    }
                    // An unconstrained pose system at this damping level is a
                    // rejected attempt; heavier damping may regularize it.
                    Err(Error::RankDeficientPoses) => break Ok(None),
                    Err(e) => break Err(e),
                }
            };
            let Some((sol, active)) = solution? else {
                damping.on_reject();
                continue;
            };

            let mut candidate_poses = poses.clone();
            let mut max_step = 0.0f64;
            for (p, delta) in sol.pose_updates.iter().enumerate() {
                let norm = delta.norm();
                let step = if norm > config.max_step_norm {
                    MotionVector::from_vector(delta * (config.max_step_norm / norm))
                } else {
                    MotionVector::from_vector(*delta)
                };
                max_step = max_step.max(step.max_norm());
                candidate_poses[p + 1] = candidate_poses[p + 1].exp_update(&step);
            }
            let mut candidate_quadrics = quadrics.clone();
            for (l, &qi) in active.iter().enumerate() {
                let delta = &sol.quadric_updates[l];
                max_step = max_step.max(delta.amax());
                candidate_quadrics[qi] = candidate_quadrics[qi].apply_delta(delta);
            }

            let cost_after =
                total_candidate_cost(&contribs, &candidate_quadrics, &candidate_poses);
            if cost_after <= cost_before {
                trace.push(CostStep {
                    cost_before,
                    cost_after,
                    damping: lambda,
                    accepted: true,
                });
                damping.on_accept();
                accepted = Some((candidate_poses, candidate_quadrics, frozen, max_step));
                break;
            }
            damping.on_reject();
        }

        let Some((new_poses, new_quadrics, frozen, max_step)) = accepted else {
            trace.push(CostStep {
                cost_before,
                cost_after: cost_before,
                damping: damping.lambda,
                accepted: false,
            });
            break;
        };
        poses = new_poses;
        quadrics = new_quadrics;
        frozen_last = frozen;
        if max_step < config.step_tol {
            converged = true;
            break;
        }
    }

    debug_assert!(
        poses[0].max_difference(&RigidTransform::identity()) == 0.0,
        "gauge pose must stay bit-identical"
    );

    let quadrics: Vec<Quadric<f64>> = quadrics
        .iter()
        .zip(&init_axes)
        .map(|(q, axis)| q.oriented_along(axis))
        .collect();

    Ok(EngineOutput {
        poses,
        quadrics,
        frozen: frozen_last,
        trace,
        converged,
        fair_scale: scale,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_system(
    contribs: &[Contribution],
    pose_a: &[Matrix6<f64>],
    pose_rhs: &[Vector6<f64>],
    m: usize,
    frozen: &[bool],
    lambda: f64,
    optimize_quadrics: bool,
) -> (BlockSystem<f64>, Vec<usize>) {
    let active: Vec<usize> = if optimize_quadrics {
        (0..contribs.len()).filter(|&q| !frozen[q]).collect()
    } else {
        Vec::new()
    };
    let mut sys = BlockSystem::new(m - 1, active.len());
    for frame in 1..m {
        let mut a = pose_a[frame];
        let diag_max = a.diagonal().amax();
        for i in 0..6 {
            a[(i, i)] += pose_a[frame][(i, i)] * lambda + lambda * diag_max;
        }
        sys.add_pose_block(frame - 1, &a);
        sys.add_pose_rhs(frame - 1, &pose_rhs[frame]);
    }
    for (l, &qi) in active.iter().enumerate() {
        let contrib = &contribs[qi];
        let mut c = contrib.c;
        let diag_max = c.diagonal().amax();
        for i in 0..6 {
            c[(i, i)] += contrib.c[(i, i)] * lambda + lambda * diag_max;
        }
        sys.add_quadric_block(l, &c);
        sys.add_quadric_rhs(l, &contrib.rhs_q);
        for frame in 1..m {
            if contrib.touched[frame] {
                sys.add_coupling_block(frame - 1, l, &contrib.b[frame]);
            }
        }
    }
    (sys, active)
}

fn curvature_map(s1: &Surface, quadrics: &[Quadric<f64>], frozen: &[bool]) -> CurvatureMap {
    let mut map = CurvatureMap::new_invalid(s1.width(), s1.height());
    for (qi, quad) in quadrics.iter().enumerate() {
        if frozen[qi] {
            continue;
        }
        let Some((u, v)) = s1.project(quad.anchor()) else {
            continue;
        };
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= s1.width() as f64 || v >= s1.height() as f64 {
            continue;
        }
        let idx = v as usize * s1.width() + u as usize;
        map.set(idx, quad.principal_curvatures());
    }
    map
}
