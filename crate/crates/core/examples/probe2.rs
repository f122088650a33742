//! Scratch diagnostics for single-frame quadric fits on rendered data.

use curvreg::eval::resolve_scene;
use curvreg::icp::SolverConfig;
use curvreg::joint::RadiusPolicy;
use curvreg::quadric::{fit_quadric_iterative, Quadric};
use curvreg::rigid::RigidTransform;
use curvreg::surface::Surface;
use curvreg::synth::{default_intrinsics, render_depth};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene_name = args.get(1).map(String::as_str).unwrap_or("synth1");
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(320);
    let height: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(240);
    let radius_scale: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0125);

    let scene = resolve_scene(scene_name).unwrap();
    let intr = default_intrinsics(width, height);
    let (frame, truth) =
        render_depth(&scene, &RigidTransform::identity(), intr, width, height).unwrap();
    let surf = Surface::backproject(&frame, 0).with_normals(5).unwrap();
    let radius = RadiusPolicy::new(radius_scale);
    let config = SolverConfig::quadric_fit();

    let mut worst: Vec<(f64, usize, f64, f64, f64, f64, usize, bool, f64)> = Vec::new();
    let mut count = 0;
    let mut err_sum = 0.0;
    for v in (0..height).step_by(4) {
        for u in (0..width).step_by(4) {
            let idx = v * width + u;
            if !surf.is_valid(idx) {
                continue;
            }
            let Some(normal) = surf.normal(idx) else { continue };
            let Some(gt) = truth.curvature.get(idx) else { continue };
            let anchor = *surf.point(idx);
            let nb = surf.neighborhood(&anchor, radius.radius(anchor.z));
            if nb.len() < 6 {
                continue;
            }
            let init = Quadric::aligned_to_normal(anchor, normal);
            let Ok((fit, rep)) = fit_quadric_iterative(&nb, &init, &config) else { continue };
            let pair = fit.principal_curvatures();
            let err = ((pair.k1 - gt.k1).powi(2) + (pair.k2 - gt.k2).powi(2)).sqrt();
            err_sum += err * err;
            count += 1;
            worst.push((
                err,
                idx,
                gt.k1,
                pair.k1,
                gt.k2,
                pair.k2,
                nb.len(),
                rep.converged,
                rep.final_rms,
            ));
        }
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!(
        "anchors={count} rms={:.4}",
        (err_sum / count as f64).sqrt()
    );
    println!("worst 25:");
    for w in worst.iter().take(25) {
        let (err, idx, g1, f1, g2, f2, n, conv, rms) = *w;
        println!(
            "  px({:3},{:3}) err={err:8.3} gt=({g1:6.2},{g2:6.2}) fit=({f1:8.2},{f2:8.2}) members={n} conv={conv} fit_rms={rms:.2e}",
            idx % width,
            idx / width
        );
    }
    // Histogram of errors.
    let bins = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, f64::INFINITY];
    let mut hist = vec![0usize; bins.len()];
    for (err, ..) in &worst {
        for (i, b) in bins.iter().enumerate() {
            if err < b {
                hist[i] += 1;
                break;
            }
        }
    }
    println!("error histogram {:?}: {:?}", bins, hist);
}
