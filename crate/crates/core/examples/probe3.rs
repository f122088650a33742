//! Scratch: dissect ICP on plane+sphere and the sphere-patch fit.

use curvreg::icp::{icp_point_to_plane, SolverConfig};
use curvreg::quadric::{fit_quadric_iterative, Neighborhood, Quadric};
use curvreg::rigid::RigidTransform;
use curvreg::surface::Surface;
use curvreg::synth::{default_intrinsics, render_depth, Primitive, Scene};
use nalgebra::{Point3, Vector3};

fn main() {
    // Part 1: sphere patch fit convergence.
    let radius = 2.0;
    let center = Point3::new(0.0, 0.0, 2.0 + radius);
    let anchor = Point3::new(0.0, 0.0, 2.0);
    let mut members = Vec::new();
    let n_side = 8;
    let extent = 0.003;
    for iy in 0..n_side {
        for ix in 0..n_side {
            let x = (ix as f64 / (n_side - 1) as f64 - 0.5) * 2.0 * extent;
            let y = (iy as f64 / (n_side - 1) as f64 - 0.5) * 2.0 * extent;
            let z = center.z - (radius * radius - x * x - y * y).sqrt();
            members.push(Point3::new(x, y, z));
        }
    }
    let nb = Neighborhood::new(anchor, members);
    let init = Quadric::aligned_to_normal(anchor, &Vector3::new(0.0, 0.0, -1.0));
    let (fit, rep) = fit_quadric_iterative(&nb, &init, &SolverConfig::quadric_fit()).unwrap();
    let pair = fit.principal_curvatures();
    println!(
        "sphere patch: k=({:.8},{:.8}) iters={} conv={} rms={:.3e}",
        pair.k1, pair.k2, rep.iterations, rep.converged, rep.final_rms
    );

    // Part 2: ICP plane+sphere.
    let scene = Scene {
        name: "plane-sphere".into(),
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
    let intr = default_intrinsics(640, 480);
    let (f_target, _) = render_depth(&scene, &RigidTransform::identity(), intr, 640, 480).unwrap();
    let (f_source, _) = render_depth(&scene, &truth, intr, 640, 480).unwrap();
    let s_target = Surface::backproject(&f_target, 0).with_normals(5).unwrap();
    let s_source = Surface::backproject(&f_source, 1).with_normals(5).unwrap();
    let result = icp_point_to_plane(
        &s_source,
        &s_target,
        &RigidTransform::identity(),
        &SolverConfig::icp(),
    )
    .unwrap();
    println!(
        "icp: t_err={:.3e} r_err={:.3e} iters={} conv={} inliers={} rms={:.3e}",
        (result.pose.translation() - truth.translation()).norm(),
        result.pose.rotation_angle(),
        result.iterations,
        result.converged,
        result.inlier_count,
        result.final_rms
    );
    println!("pose t = {:?}", result.pose.translation());
    for (i, s) in result.cost_trace.iter().enumerate() {
        println!(
            "  it {i}: before={:.6e} after={:.6e} lambda={:.1e} acc={}",
            s.cost_before, s.cost_after, s.damping, s.accepted
        );
    }
}
