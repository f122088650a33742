//! Scratch: per-frame error structure of the ICP chain and bundle, noiseless.

use curvreg::eval::{build_synthetic_dataset, pose_error, resolve_scene, DatasetContext, Method};
use curvreg::joint::RadiusPolicy;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene_name = args.get(1).map(String::as_str).unwrap_or("synth1");
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(320);
    let height: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(240);

    let scene = resolve_scene(scene_name).unwrap();
    let ds = build_synthetic_dataset(&scene, 0, 1, 5, 0.010, width, height, 5).unwrap();
    let ctx = DatasetContext::new(&ds, 4, RadiusPolicy::new(0.0125));
    for method in [Method::IcpFtf, Method::IcpBundle] {
        let out = ctx.run(method).unwrap();
        let traj = out.trajectory.unwrap();
        let rep = pose_error(&traj, &ds.truth_trajectory).unwrap();
        println!("{}: rms t={:.3e} r={:.3e}", method.name(), rep.translational_rms, rep.rotational_rms);
        for (k, (t, e)) in traj.iter().zip(&rep.per_frame).enumerate() {
            let tt = t.translation();
            println!(
                "  frame {k}: est=({:+.6}, {:+.6}, {:+.6}) terr={:.3e} rerr={:.3e}",
                tt.x, tt.y, tt.z, e.0, e.1
            );
        }
    }
}
