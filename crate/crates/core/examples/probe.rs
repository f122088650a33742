//! Scratch diagnostics for solver behavior across noise levels.

use curvreg::eval::{
    build_synthetic_dataset, pose_error, resolve_scene, DatasetContext, Method,
};
use curvreg::joint::RadiusPolicy;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene_name = args.get(1).map(String::as_str).unwrap_or("synth1");
    let sigma: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(160);
    let height: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(120);
    let radius_scale: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.0125);
    let frames: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5);
    let stride: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(4);

    let scene = resolve_scene(scene_name).unwrap();
    println!("scene={scene_name} sigma={sigma} size={width}x{height} radius_scale={radius_scale} frames={frames} stride={stride}");

    for seed in [1u64, 2, 3] {
        let t0 = std::time::Instant::now();
        let ds = build_synthetic_dataset(&scene, sigma, seed, frames, 0.010, width, height, 5)
            .unwrap();
        let ctx = DatasetContext::new(&ds, stride, RadiusPolicy::new(radius_scale));
        print!("seed {seed} [gen {:?}]: ", t0.elapsed());
        for method in [
            Method::IcpFtf,
            Method::IcpBundle,
            Method::QFull,
            Method::JFtf,
            Method::JFull,
        ] {
            let t = std::time::Instant::now();
            match ctx.run(method) {
                Ok(out) => {
                    let traj = out.trajectory.unwrap();
                    let rep = pose_error(&traj, &ds.truth_trajectory).unwrap();
                    print!(
                        "{}: t={:.3e} r={:.3e} ({:?})  ",
                        method.name(),
                        rep.translational_rms,
                        rep.rotational_rms,
                        t.elapsed()
                    );
                }
                Err(e) => print!("{}: ERR {e}  ", method.name()),
            }
        }
        println!();
        for method in [Method::QuadLs, Method::QuadIt, Method::JFtf, Method::JFull] {
            match ctx.run(method) {
                Ok(out) => {
                    if let Some(map) = out.curvature {
                        let rms =
                            curvreg::eval::curvature_rms(&map, &ds.truth_curvature).unwrap();
                        print!("  curv {}: {:.4} (n={})", method.name(), rms, map.valid_count());
                    }
                }
                Err(e) => print!("  curv {}: ERR {e}", method.name()),
            }
        }
        println!();
    }
}
