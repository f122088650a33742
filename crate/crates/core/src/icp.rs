//! Dense point-to-plane ICP baselines: frame-to-frame alignment and a
//! multi-frame pose-graph refinement over semi-dense frame pairs.

use nalgebra::{DMatrix, DVector, Matrix6, Point3, Vector3, Vector6};
use rayon::prelude::*;

use crate::damping::{CostStep, Damping, MAX_RETRIES};
use crate::error::{Error, Result};
use crate::joint::{fair_weight, resolve_fair_scale};
use crate::rigid::{MotionVector, RigidTransform};
use crate::surface::Surface;

/// Shared solver configuration. Solver-specific defaults come from the
/// constructors:
///
/// | field          | `icp()` | `quadric_fit()` | `joint()` |
/// |----------------|---------|-----------------|-----------|
/// | max_iterations | 30      | 25              | 15        |
/// | step_tol       | 1e-8    | 1e-8            | 1e-7      |
/// | fair_scale     | auto    | auto            | auto      |
/// | gap_reject     | 0.10 m  | 0.10 m          | 0.10 m    |
/// | angle_reject   | 30 deg  | 30 deg          | 30 deg    |
/// | max_step_norm  | 1.0     | 1.0             | 1.0       |
///
/// `fair_scale = None` resolves the fair M-estimator scale from the current
/// residual distribution: `max(2 * median |residual|, 1e-4)` (the quadric fit
/// adds a median-distance term to keep its distance taper a window).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub step_tol: f64,
    /// Fair weight scale `n`; `None` selects the data-driven default.
    pub fair_scale: Option<f64>,
    /// Correspondence rejection: maximum Euclidean gap, meters.
    pub gap_reject: f64,
    /// Correspondence rejection: maximum normal angle, radians.
    pub angle_reject: f64,
    /// Cap on the norm of a single pose update.
    pub max_step_norm: f64,
}

impl SolverConfig {
    pub fn icp() -> Self {
        Self {
            max_iterations: 30,
            step_tol: 1e-8,
            fair_scale: None,
            gap_reject: 0.10,
            angle_reject: 30f64.to_radians(),
            max_step_norm: 1.0,
        }
    }

    pub fn quadric_fit() -> Self {
        Self {
            max_iterations: 25,
            step_tol: 1e-8,
            ..Self::icp()
        }
    }

    pub fn joint() -> Self {
        Self {
            max_iterations: 15,
            step_tol: 1e-7,
            ..Self::icp()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.max_iterations > 200 {
            return Err(Error::InvalidArgument(
                "max_iterations must be in 1..=200".into(),
            ));
        }
        let positives = [
            ("step_tol", self.step_tol),
            ("gap_reject", self.gap_reject),
            ("angle_reject", self.angle_reject),
            ("max_step_norm", self.max_step_norm),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if let Some(n) = self.fair_scale {
            if !(n > 0.0) {
                return Err(Error::InvalidArgument("fair_scale must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::icp()
    }
}

/// Result of a frame-to-frame alignment.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Transform mapping source-frame points into the target frame.
    pub pose: RigidTransform<f64>,
    pub iterations: usize,
    /// Unweighted RMS of the final iteration's inlier residuals.
    pub final_rms: f64,
    pub inlier_count: usize,
    pub converged: bool,
    pub cost_trace: Vec<CostStep>,
}

struct IcpRow {
    source: Point3<f64>,
    target: Point3<f64>,
    normal: Vector3<f64>,
    weight: f64,
    residual: f64,
}

/// Point-to-plane residual `n . (p' - q)` and its six-parameter Jacobian for
/// a left-multiplicative pose increment, `[p' x n, n]`.
#[inline]
fn point_to_plane_jacobian(p_transformed: &Point3<f64>, normal: &Vector3<f64>) -> Vector6<f64> {
    let rot = p_transformed.coords.cross(normal);
    Vector6::new(rot.x, rot.y, rot.z, normal.x, normal.y, normal.z)
}

fn associate_icp(
    source: &Surface,
    target: &Surface,
    pose: &RigidTransform<f64>,
    config: &SolverConfig,
) -> Vec<IcpRow> {
    let indices: Vec<usize> = source.valid_indices().collect();
    indices
        .par_iter()
        .filter_map(|&idx| {
            let p = source.point(idx);
            let p_t = pose.transform_point(p);
            let sn = source.normal(idx).map(|n| pose.transform_vector(n));
            let corr = target.closest_point_projective(
                &p_t,
                sn.as_ref(),
                config.gap_reject,
                config.angle_reject,
            )?;
            let residual = corr.normal.dot(&(p_t - corr.point));
            Some(IcpRow {
                source: *p,
                target: corr.point,
                normal: corr.normal,
                weight: 1.0,
                residual,
            })
        })
        .collect()
}

fn clamp_step(delta: Vector6<f64>, max_norm: f64) -> MotionVector<f64> {
    let norm = delta.norm();
    let scaled = if norm > max_norm {
        delta * (max_norm / norm)
    } else {
        delta
    };
    MotionVector::from_vector(scaled)
}

/// Dense frame-to-frame point-to-plane ICP. Each outer iteration re-associates
/// via projective lookup, solves the fair-reweighted normal equations and
/// applies a damped exponential update; a step is only accepted if the frozen
/// weighted cost does not increase.
pub fn icp_point_to_plane(
    source: &Surface,
    target: &Surface,
    init: &RigidTransform<f64>,
    config: &SolverConfig,
) -> Result<AlignmentResult> {
    config.validate()?;
    if !target.has_normals() {
        return Err(Error::InvalidArgument("target surface needs normals".into()));
    }

    let mut pose = *init;
    let mut damping = Damping::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut final_rows: Vec<IcpRow> = Vec::new();

    for it in 0..config.max_iterations {
        let mut rows = associate_icp(source, target, &pose, config);
        if rows.len() < 6 {
            return Err(Error::InsufficientOverlap {
                found: rows.len(),
                required: 6,
            });
        }
        // The scale tracks the current residual distribution, so stale
        // associations lose influence as the alignment tightens.
        let scale = {
            let residuals: Vec<f64> = rows.iter().map(|r| r.residual).collect();
            resolve_fair_scale(config, &residuals)
        };
        for row in &mut rows {
            row.weight = fair_weight(row.residual, 0.0, scale);
        }

        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut cost = 0.0;
        for row in &rows {
            let p_t = pose.transform_point(&row.source);
            let j = point_to_plane_jacobian(&p_t, &row.normal);
            h += (j * j.transpose()) * row.weight;
            g -= j * (row.weight * row.residual);
            cost += row.weight * row.residual * row.residual;
        }

        let mut accepted = None;
        let diag_max = h.diagonal().amax();
        for _ in 0..=MAX_RETRIES {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += h[(i, i)] * damping.lambda + damping.lambda * diag_max;
            }
            let Some(chol) = damped.cholesky() else {
                damping.on_reject();
                continue;
            };
            let delta = clamp_step(chol.solve(&g), config.max_step_norm);
            let candidate = pose.exp_update(&delta);
            let new_cost: f64 = rows
                .par_iter()
                .map(|row| {
                    let e = row
                        .normal
                        .dot(&(candidate.transform_point(&row.source) - row.target));
                    row.weight * e * e
                })
                .collect::<Vec<_>>()
                .iter()
                .sum();
            if new_cost <= cost {
                trace.push(CostStep {
                    cost_before: cost,
                    cost_after: new_cost,
                    damping: damping.lambda,
                    accepted: true,
                });
                damping.on_accept();
                accepted = Some((candidate, delta));
                break;
            }
            damping.on_reject();
        }

        iterations = it + 1;
        let Some((candidate, delta)) = accepted else {
            trace.push(CostStep {
                cost_before: cost,
                cost_after: cost,
                damping: damping.lambda,
                accepted: false,
            });
            final_rows = rows;
            break;
        };
        pose = candidate;
        final_rows = rows;
        if delta.max_norm() < config.step_tol {
            converged = true;
            break;
        }
    }

    let inlier_count = final_rows.len();
    let sum_sq: f64 = final_rows
        .iter()
        .map(|row| {
            let e = row
                .normal
                .dot(&(pose.transform_point(&row.source) - row.target));
            e * e
        })
        .sum();
    let final_rms = if inlier_count > 0 {
        (sum_sq / inlier_count as f64).sqrt()
    } else {
        0.0
    };

    Ok(AlignmentResult {
        pose,
        iterations,
        final_rms,
        inlier_count,
        converged,
        cost_trace: trace,
    })
}

/// Result of the multi-frame pose-graph refinement.
#[derive(Debug, Clone)]
pub struct BundleResult {
    /// Refined camera-to-reference poses; pose 0 is the gauge and is returned
    /// exactly as passed in.
    pub poses: Vec<RigidTransform<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of (iteration, pair) events where a pair had too few
    /// correspondences and was dropped for that iteration.
    pub dropped_pairs: usize,
    pub cost_trace: Vec<CostStep>,
}

/// All pairs `(i, j)` with `i < j <= i + max_gap`: the default semi-dense
/// pose graph.
pub fn default_pairs(frames: usize, max_gap: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..frames {
        for j in (i + 1)..frames.min(i + max_gap + 1) {
            pairs.push((i, j));
        }
    }
    pairs
}

fn graph_connected(nodes: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        parent[ri] = rj;
    }
    let root = find(&mut parent, 0);
    (0..nodes).all(|i| find(&mut parent, i) == root)
}

struct BundleRow {
    frame_i: usize,
    frame_j: usize,
    source: Point3<f64>,
    /// Target point and normal in frame j coordinates.
    target: Point3<f64>,
    normal: Vector3<f64>,
    weight: f64,
    residual: f64,
}

fn bundle_residual(
    poses: &[RigidTransform<f64>],
    row: &BundleRow,
) -> (f64, Point3<f64>, Vector3<f64>) {
    let x = poses[row.frame_i].transform_point(&row.source);
    let q_w = poses[row.frame_j].transform_point(&row.target);
    let n_w = poses[row.frame_j].transform_vector(&row.normal);
    (n_w.dot(&(x - q_w)), x, n_w)
}

/// Joint Gauss-Newton over all poses minimizing the sum of fair-weighted
/// point-to-plane residuals over the listed frame pairs. Pose 0 is held fixed
/// as the gauge. Pairs with fewer than 6 correspondences are dropped for the
/// iteration; the solve fails only if the surviving graph disconnects.
pub fn icp_bundle(
    surfaces: &[Surface],
    init_poses: &[RigidTransform<f64>],
    pairs: &[(usize, usize)],
    config: &SolverConfig,
) -> Result<BundleResult> {
    config.validate()?;
    let m = surfaces.len();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "pose-graph refinement needs at least 2 frames".into(),
        ));
    }
    if init_poses.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} surfaces but {} initial poses",
            m,
            init_poses.len()
        )));
    }
    for s in surfaces {
        if !s.has_normals() {
            return Err(Error::InvalidArgument("all surfaces need normals".into()));
        }
    }
    for &(i, j) in pairs {
        if i >= m || j >= m || i == j {
            return Err(Error::InvalidArgument(format!("bad pair ({i}, {j})")));
        }
    }
    if !graph_connected(m, pairs.iter().copied()) {
        return Err(Error::DisconnectedPairGraph);
    }

    let mut poses = init_poses.to_vec();
    let mut damping = Damping::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut dropped_total = 0usize;
    let free = m - 1; // poses 1..m

    for it in 0..config.max_iterations {
        // Associate every pair under the current poses.
        let per_pair: Vec<Vec<BundleRow>> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let rel = poses[j].invert() * poses[i];
                let indices: Vec<usize> = surfaces[i].valid_indices().collect();
                indices
                    .par_iter()
                    .filter_map(|&idx| {
                        let p = surfaces[i].point(idx);
                        let p_j = rel.transform_point(p);
                        let sn = surfaces[i].normal(idx).map(|n| rel.transform_vector(n));
                        let corr = surfaces[j].closest_point_projective(
                            &p_j,
                            sn.as_ref(),
                            config.gap_reject,
                            config.angle_reject,
                        )?;
                        let mut row = BundleRow {
                            frame_i: i,
                            frame_j: j,
                            source: *p,
                            target: corr.point,
                            normal: corr.normal,
                            weight: 1.0,
                            residual: 0.0,
                        };
                        row.residual = bundle_residual(&poses, &row).0;
                        Some(row)
                    })
                    .collect()
            })
            .collect();

        let mut rows: Vec<BundleRow> = Vec::new();
        let mut surviving: Vec<(usize, usize)> = Vec::new();
        for (pair, pair_rows) in pairs.iter().zip(per_pair) {
            if pair_rows.len() < 6 {
                dropped_total += 1;
                log::warn!(
                    "dropping pair ({}, {}) with {} correspondences",
                    pair.0,
                    pair.1,
                    pair_rows.len()
                );
                continue;
            }
            surviving.push(*pair);
            rows.extend(pair_rows);
        }
        if !graph_connected(m, surviving.iter().copied()) {
            return Err(Error::DisconnectedPairGraph);
        }

        let scale = {
            let residuals: Vec<f64> = rows.iter().map(|r| r.residual).collect();
            resolve_fair_scale(config, &residuals)
        };
        for row in &mut rows {
            row.weight = fair_weight(row.residual, 0.0, scale);
        }

        let mut h = DMatrix::<f64>::zeros(6 * free, 6 * free);
        let mut g = DVector::<f64>::zeros(6 * free);
        let mut cost = 0.0;
        for row in &rows {
            let (e, x, n_w) = bundle_residual(&poses, row);
            let j6 = point_to_plane_jacobian(&x, &n_w);
            cost += row.weight * e * e;
            // The stacked Jacobian row is +j6 at pose i and -j6 at pose j
            // (pose 0 has no columns).
            let blocks: [(usize, f64); 2] = [(row.frame_i, 1.0), (row.frame_j, -1.0)];
            for (fa, sa) in blocks {
                if fa == 0 {
                    continue;
                }
                let ca = (fa - 1) * 6;
                for r in 0..6 {
                    g[ca + r] -= row.weight * sa * j6[r] * e;
                }
                for (fb, sb) in blocks {
                    if fb == 0 {
                        continue;
                    }
                    let cb = (fb - 1) * 6;
                    let s = row.weight * sa * sb;
                    for r in 0..6 {
                        for c in 0..6 {
                            h[(ca + r, cb + c)] += s * j6[r] * j6[c];
                        }
                    }
                }
            }
        }

        let mut accepted = None;
        let diag_max = (0..6 * free).fold(0.0f64, |m, i| m.max(h[(i, i)]));
        for _ in 0..=MAX_RETRIES {
            let mut damped = h.clone();
            for i in 0..6 * free {
                damped[(i, i)] += h[(i, i)] * damping.lambda + damping.lambda * diag_max;
            }
            let Some(chol) = damped.cholesky() else {
                damping.on_reject();
                continue;
            };
            let delta = chol.solve(&g);
            let mut candidate = poses.clone();
            let mut max_step = 0.0f64;
            for f in 0..free {
                let step = clamp_step(
                    Vector6::from_iterator((0..6).map(|k| delta[f * 6 + k])),
                    config.max_step_norm,
                );
                max_step = max_step.max(step.max_norm());
                candidate[f + 1] = candidate[f + 1].exp_update(&step);
            }
            let new_cost: f64 = rows
                .par_iter()
                .map(|row| {
                    let (e, _, _) = bundle_residual(&candidate, row);
                    row.weight * e * e
                })
                .collect::<Vec<_>>()
                .iter()
                .sum();
            if new_cost <= cost {
                trace.push(CostStep {
                    cost_before: cost,
                    cost_after: new_cost,
                    damping: damping.lambda,
                    accepted: true,
                });
                damping.on_accept();
                accepted = Some((candidate, max_step));
                break;
            }
            damping.on_reject();
        }

        iterations = it + 1;
        let Some((candidate, max_step)) = accepted else {
            trace.push(CostStep {
                cost_before: cost,
                cost_after: cost,
                damping: damping.lambda,
                accepted: false,
            });
            break;
        };
        poses = candidate;
        if max_step < config.step_tol {
            converged = true;
            break;
        }
    }

    Ok(BundleResult {
        poses,
        iterations,
        converged,
        dropped_pairs: dropped_total,
        cost_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{DepthFrame, Intrinsics};
    use crate::synth::{default_intrinsics, render_depth, Primitive, Scene};

    fn test_scene() -> Scene {
        Scene {
            name: "icp-test".into(),
            primitives: vec![
                Primitive::Plane {
                    point: [0.0, 0.4, 2.0],
                    normal: [0.1, -1.0, 0.0],
                },
                Primitive::Plane {
                    point: [0.0, 0.0, 3.5],
                    normal: [0.2, -0.1, -1.0],
                },
                Primitive::Sphere {
                    center: [0.0, 0.05, 2.0],
                    radius: 0.4,
                },
            ],
        }
    }

    fn render_surface(scene: &Scene, cam: &RigidTransform<f64>, id: usize) -> Surface {
        let intr = default_intrinsics(96, 72);
        let (frame, _) = render_depth(scene, cam, intr, 96, 72).unwrap();
        Surface::backproject(&frame, id).with_normals(5).unwrap()
    }

    #[test]
    fn identical_frames_converge_to_identity_in_one_iteration() {
        let scene = test_scene();
        let s = render_surface(&scene, &RigidTransform::identity(), 0);
        let result =
            icp_point_to_plane(&s, &s, &RigidTransform::identity(), &SolverConfig::icp()).unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations, 1);
        assert!(result.pose.max_difference(&RigidTransform::identity()) < 1e-10);
        assert!(result.final_rms < 1e-12);
    }

    #[test]
    fn recovers_small_translation_on_plane_sphere_scene() {
        // A tilted plane plus two floating spheres (no contact creases; the
        // silhouette depth jumps are gap-gated away; two spheres are needed
        // because plane + one sphere leaves a rotation about the center axis
        // parallel to the plane normal unconstrained). Plane residuals are
        // exact and the spheres' association-curvature residue averages out,
        // recovering the 5 mm rail motion to a few micrometers.
        let scene = Scene {
            name: "plane-spheres".into(),
            primitives: vec![
                Primitive::Plane {
                    point: [0.0, 0.0, 4.0],
                    normal: [0.25, -0.2, -1.0],
                },
                Primitive::Sphere {
                    center: [-0.45, 0.0, 2.6],
                    radius: 0.8,
                },
                Primitive::Sphere {
                    center: [0.55, 0.15, 2.2],
                    radius: 0.5,
                },
            ],
        };
        let truth = RigidTransform::from_translation(0.005, 0.0, 0.0);
        // Source = frame at rail position 5 mm, target = frame at origin;
        // the transform source -> target is +5 mm in x.
        let intr = default_intrinsics(320, 240);
        let (f_target, _) =
            render_depth(&scene, &RigidTransform::identity(), intr, 320, 240).unwrap();
        let (f_source, _) = render_depth(&scene, &truth, intr, 320, 240).unwrap();
        let s_target = Surface::backproject(&f_target, 0).with_normals(5).unwrap();
        let s_source = Surface::backproject(&f_source, 1).with_normals(5).unwrap();
        let result = icp_point_to_plane(
            &s_source,
            &s_target,
            &RigidTransform::identity(),
            &SolverConfig::icp(),
        )
        .unwrap();
        let err = (result.pose.translation() - truth.translation()).norm();
        // Nearest-pixel association on curved surfaces floors the attainable
        // accuracy at a few micrometers at this resolution.
        assert!(err < 1e-5, "translation error {err}");
        assert!(result.pose.rotation_angle() < 1e-5);
    }

    #[test]
    fn ground_truth_init_gives_zero_first_step_on_plane() {
        // A single tilted plane: at the true pose every residual vanishes up
        // to the f32 depth quantization of the rendered frames, so the first
        // step must vanish at the same level.
        let scene = Scene {
            name: "plane".into(),
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 2.5],
                normal: [0.3, -0.25, -1.0],
            }],
        };
        let truth = RigidTransform::from_translation(0.008, 0.0, 0.0);
        let s_target = render_surface(&scene, &RigidTransform::identity(), 0);
        let s_source = render_surface(&scene, &truth, 1);
        let mut config = SolverConfig::icp();
        config.max_iterations = 1;
        let result = icp_point_to_plane(&s_source, &s_target, &truth, &config).unwrap();
        assert!(
            result.pose.max_difference(&truth) < 1e-6,
            "first step should vanish at the optimum: {:?}",
            result.pose.max_difference(&truth)
        );
    }

    #[test]
    fn insufficient_overlap_is_reported() {
        let scene = test_scene();
        let s1 = render_surface(&scene, &RigidTransform::identity(), 0);
        let far = RigidTransform::from_translation(100.0, 0.0, 0.0);
        let s2 = render_surface(&scene, &far, 1);
        match icp_point_to_plane(&s1, &s2, &RigidTransform::identity(), &SolverConfig::icp()) {
            Err(Error::InsufficientOverlap { .. }) => {}
            other => panic!("expected insufficient overlap, got {other:?}"),
        }
    }

    #[test]
    fn normal_matrix_is_symmetric_psd() {
        let scene = test_scene();
        let s = render_surface(&scene, &RigidTransform::identity(), 0);
        let rows = associate_icp(&s, &s, &RigidTransform::identity(), &SolverConfig::icp());
        let mut h = Matrix6::<f64>::zeros();
        for row in &rows {
            let j = point_to_plane_jacobian(&row.source, &row.normal);
            h += j * j.transpose();
        }
        assert!((h - h.transpose()).amax() < 1e-12 * h.amax());
        let eigs = h.symmetric_eigenvalues();
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > -1e-12 * h.amax());
    }

    #[test]
    fn residual_is_zero_for_point_on_target_plane() {
        let n = Vector3::new(0.0, 0.0, -1.0);
        let q = Point3::new(0.3, 0.2, 2.0);
        let p = Point3::new(0.25, 0.18, 2.0); // same plane z = 2
        let e = n.dot(&(p - q));
        assert_eq!(e, 0.0);
    }

    #[test]
    fn bundle_identical_frames_stay_identity() {
        let scene = test_scene();
        let s = render_surface(&scene, &RigidTransform::identity(), 0);
        let surfaces = vec![s.clone(), s];
        let init = vec![RigidTransform::identity(); 2];
        let result = icp_bundle(&surfaces, &init, &[(0, 1)], &SolverConfig::icp()).unwrap();
        for pose in &result.poses {
            assert!(pose.max_difference(&RigidTransform::identity()) < 1e-10);
        }
    }

    #[test]
    fn bundle_rejects_single_frame_and_disconnected_graph() {
        let scene = test_scene();
        let s = render_surface(&scene, &RigidTransform::identity(), 0);
        assert!(matches!(
            icp_bundle(
                &[s.clone()],
                &[RigidTransform::identity()],
                &[],
                &SolverConfig::icp()
            ),
            Err(Error::InvalidArgument(_))
        ));
        let surfaces = vec![s.clone(), s.clone(), s];
        let init = vec![RigidTransform::identity(); 3];
        assert!(matches!(
            icp_bundle(&surfaces, &init, &[(0, 1)], &SolverConfig::icp()),
            Err(Error::DisconnectedPairGraph)
        ));
    }

    #[test]
    fn bundle_recovers_rail_on_plane_scene() {
        let scene = Scene {
            name: "planes".into(),
            primitives: vec![
                Primitive::Plane {
                    point: [0.0, 0.45, 2.0],
                    normal: [0.15, -1.0, 0.1],
                },
                Primitive::Plane {
                    point: [0.0, 0.0, 3.0],
                    normal: [0.3, -0.2, -1.0],
                },
                Primitive::Plane {
                    point: [-0.9, 0.0, 2.0],
                    normal: [1.0, 0.1, -0.4],
                },
            ],
        };
        let rail = crate::synth::rail_trajectory(0.01, 3);
        let surfaces: Vec<Surface> = rail
            .iter()
            .enumerate()
            .map(|(k, cam)| render_surface(&scene, cam, k))
            .collect();
        // Slightly perturbed init.
        let init: Vec<_> = rail
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if k == 0 {
                    *t
                } else {
                    RigidTransform::from_translation(0.002, -0.001, 0.001) * *t
                }
            })
            .collect();
        let pairs = default_pairs(3, 2);
        let result = icp_bundle(&surfaces, &init, &pairs, &SolverConfig::icp()).unwrap();
        for (est, truth) in result.poses.iter().zip(&rail) {
            let err = (est.translation() - truth.translation()).norm();
            assert!(err < 1e-5, "pose error {err}");
        }
        for step in &result.cost_trace {
            assert!(step.is_non_increasing());
        }
    }

    #[test]
    fn bundle_gauge_shift_moves_all_outputs_rigidly() {
        let scene = test_scene();
        let rail = crate::synth::rail_trajectory(0.01, 3);
        let surfaces: Vec<Surface> = rail
            .iter()
            .enumerate()
            .map(|(k, cam)| render_surface(&scene, cam, k))
            .collect();
        let pairs = default_pairs(3, 2);
        let mut config = SolverConfig::icp();
        config.max_iterations = 8;
        let base = icp_bundle(&surfaces, &rail, &pairs, &config).unwrap();

        let shift = crate::rigid::exp_motion(&MotionVector::new([
            0.02, -0.01, 0.03, 0.05, -0.02, 0.04,
        ]));
        let shifted_init: Vec<_> = rail.iter().map(|t| shift * *t).collect();
        let shifted = icp_bundle(&surfaces, &shifted_init, &pairs, &config).unwrap();
        for (a, b) in base.poses.iter().zip(&shifted.poses) {
            let moved = shift * *a;
            assert!(
                moved.max_difference(b) < 1e-6,
                "gauge covariance violated: {:?}",
                moved.max_difference(b)
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::icp().validate().is_ok());
        let mut bad = SolverConfig::icp();
        bad.max_iterations = 500;
        assert!(bad.validate().is_err());
        let mut bad = SolverConfig::icp();
        bad.step_tol = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = SolverConfig::icp();
        bad.fair_scale = Some(-1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn depth_frame_surface_pipeline_is_deterministic() {
        let scene = test_scene();
        let intr = Intrinsics::new(84.0, 84.0, 47.5, 35.5);
        let (f1, _) = render_depth(&scene, &RigidTransform::identity(), intr, 96, 72).unwrap();
        let (f2, _) = render_depth(&scene, &RigidTransform::identity(), intr, 96, 72).unwrap();
        assert_eq!(f1.depth(), f2.depth());
        let _ = DepthFrame::new(96, 72, intr, f1.depth().to_vec()).unwrap();
    }
}
