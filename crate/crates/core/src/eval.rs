//! Trajectory and curvature metrics, the one-shot least-squares quadric
//! baseline, dataset manifests and the experiment driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damping::CostStep;
use crate::error::{Error, Result};
use crate::icp::{default_pairs, icp_bundle, icp_point_to_plane, SolverConfig};
use crate::joint::RadiusPolicy;
use crate::quadric::{fit_quadric_iterative, CurvatureMap, Neighborhood, Quadric};
use crate::rigid::{read_trajectory, write_trajectory, RigidTransform};
use crate::surface::{DepthFrame, Surface};
use crate::synth::{add_noise, default_intrinsics, rail_trajectory, render_depth, NoiseModel, Scene};

/// Per-trajectory RMS pose error with the per-frame breakdown
/// (translational meters, rotational radians); frame 0 is the gauge.
#[derive(Debug, Clone)]
pub struct PoseErrorReport {
    pub translational_rms: f64,
    pub rotational_rms: f64,
    pub per_frame: Vec<(f64, f64)>,
}

/// Re-expresses a trajectory relative to its first pose.
pub fn gauge_align(trajectory: &[RigidTransform<f64>]) -> Vec<RigidTransform<f64>> {
    if trajectory.is_empty() {
        return Vec::new();
    }
    let inv = trajectory[0].invert();
    trajectory.iter().map(|t| inv * *t).collect()
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v * v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Gauge-aligned absolute pose errors: per-frame translational error
/// `|t_est - t_true|` and geodesic rotation angle of `R_est R_true^T`, RMS
/// over frames 1..M-1.
pub fn pose_error(
    estimated: &[RigidTransform<f64>],
    truth: &[RigidTransform<f64>],
) -> Result<PoseErrorReport> {
    if estimated.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    let est = gauge_align(estimated);
    let tru = gauge_align(truth);
    let per_frame: Vec<(f64, f64)> = est
        .iter()
        .zip(&tru)
        .map(|(e, t)| {
            let dt = (e.translation() - t.translation()).norm();
            let dr = (*e * t.invert()).rotation_angle();
            (dt, dr)
        })
        .collect();
    Ok(PoseErrorReport {
        translational_rms: rms(per_frame.iter().skip(1).map(|p| p.0)),
        rotational_rms: rms(per_frame.iter().skip(1).map(|p| p.1)),
        per_frame,
    })
}

/// Per-frame relative (consecutive-step) pose errors, for the long-form CSV.
pub fn relative_errors(
    estimated: &[RigidTransform<f64>],
    truth: &[RigidTransform<f64>],
) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0)];
    for k in 1..estimated.len().min(truth.len()) {
        let rel_e = estimated[k - 1].invert() * estimated[k];
        let rel_t = truth[k - 1].invert() * truth[k];
        let dt = (rel_e.translation() - rel_t.translation()).norm();
        let dr = (rel_e * rel_t.invert()).rotation_angle();
        out.push((dt, dr));
    }
    out
}

/// Cumulative translational deviation from ground truth per frame; entry 0 is
/// exactly 0 (the gauge frame).
#[derive(Debug, Clone)]
pub struct DriftCurve {
    pub per_frame: Vec<f64>,
}

pub fn drift_curve(
    estimated: &[RigidTransform<f64>],
    truth: &[RigidTransform<f64>],
) -> Result<DriftCurve> {
    let report = pose_error(estimated, truth)?;
    let mut per_frame: Vec<f64> = report.per_frame.iter().map(|p| p.0).collect();
    per_frame[0] = 0.0;
    Ok(DriftCurve { per_frame })
}

/// RMS over common-valid pixels of
/// `sqrt((k1_e - k1_t)^2 + (k2_e - k2_t)^2)`.
pub fn curvature_rms(estimate: &CurvatureMap, truth: &CurvatureMap) -> Result<f64> {
    if estimate.width() != truth.width() || estimate.height() != truth.height() {
        return Err(Error::InvalidArgument(format!(
            "curvature grids differ: {}x{} vs {}x{}",
            estimate.width(),
            estimate.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..estimate.len() {
        if let (Some(e), Some(t)) = (estimate.get(idx), truth.get(idx)) {
            sum += (e.k1 - t.k1).powi(2) + (e.k2 - t.k2).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok((sum / count as f64).sqrt())
}

/// Pixels to keep for curvature comparison: valid and farther than
/// `margin` pixels (Chebyshev) from a depth discontinuity (jump > `jump`
/// meters between 4-neighbours, or a valid/invalid boundary).
pub fn discontinuity_mask(frame: &DepthFrame, jump: f64, margin: usize) -> Vec<bool> {
    let (w, h) = (frame.width(), frame.height());
    let mut edge = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            if !frame.is_valid(u, v) {
                continue;
            }
            let z = frame.depth_at(u, v) as f64;
            let mut is_edge = false;
            let neighbors = [
                (u.wrapping_sub(1), v),
                (u + 1, v),
                (u, v.wrapping_sub(1)),
                (u, v + 1),
            ];
            for (nu, nv) in neighbors {
                if nu >= w || nv >= h {
                    continue;
                }
                if !frame.is_valid(nu, nv) {
                    is_edge = true;
                    break;
                }
                if ((frame.depth_at(nu, nv) as f64) - z).abs() > jump {
                    is_edge = true;
                    break;
                }
            }
            edge[idx] = is_edge;
        }
    }
    let mut keep = vec![false; w * h];
    let m = margin as isize;
    for v in 0..h as isize {
        for u in 0..w as isize {
            let idx = (v * w as isize + u) as usize;
            if !frame.is_valid(u as usize, v as usize) {
                continue;
            }
            let mut near_edge = false;
            'scan: for dv in -m..=m {
                for du in -m..=m {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= w as isize || nv >= h as isize {
                        continue;
                    }
                    if edge[(nv * w as isize + nu) as usize] {
                        near_edge = true;
                        break 'scan;
                    }
                }
            }
            keep[idx] = !near_edge;
        }
    }
    keep
}

/// Pixels to keep for curvature comparison with respect to surface folds:
/// valid and farther than `margin` pixels (Chebyshev) from a crease where the
/// true normal turns by more than `max_angle` radians between 4-neighbours.
/// Curvature ground truth is undefined on such folds.
pub fn normal_fold_mask(
    normals: &[nalgebra::Vector3<f64>],
    normal_valid: &[bool],
    width: usize,
    height: usize,
    max_angle: f64,
    margin: usize,
) -> Vec<bool> {
    let cos_limit = max_angle.cos();
    let mut edge = vec![false; width * height];
    for v in 0..height {
        for u in 0..width {
            let idx = v * width + u;
            if !normal_valid[idx] {
                continue;
            }
            let neighbors = [
                (u.wrapping_sub(1), v),
                (u + 1, v),
                (u, v.wrapping_sub(1)),
                (u, v + 1),
            ];
            for (nu, nv) in neighbors {
                if nu >= width || nv >= height {
                    continue;
                }
                let nidx = nv * width + nu;
                if normal_valid[nidx] && normals[idx].dot(&normals[nidx]) < cos_limit {
                    edge[idx] = true;
                    break;
                }
            }
        }
    }
    let mut keep = vec![false; width * height];
    let m = margin as isize;
    for v in 0..height as isize {
        for u in 0..width as isize {
            let idx = (v * width as isize + u) as usize;
            if !normal_valid[idx] {
                continue;
            }
            let mut near = false;
            'scan: for dv in -m..=m {
                for du in -m..=m {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= width as isize || nv >= height as isize {
                        continue;
                    }
                    if edge[(nv * width as isize + nu) as usize] {
                        near = true;
                        break 'scan;
                    }
                }
            }
            keep[idx] = !near;
        }
    }
    keep
}

/// Applies a keep-mask to a curvature map, invalidating everything else.
pub fn apply_mask(map: &CurvatureMap, keep: &[bool]) -> CurvatureMap {
    let mut out = map.clone();
    for (idx, &k) in keep.iter().enumerate() {
        if !k {
            out.invalidate(idx);
        }
    }
    out
}

/// One-shot linear least-squares quadric fit: rotation fixed from the
/// estimated camera-facing normal, then `z' = c0 + (a x'^2 + 2 b x'y' +
/// c y'^2)/2` solved linearly in the aligned frame (`t_z = -c0`).
pub fn fit_quadric_ls(
    nb: &Neighborhood<f64>,
    camera_facing_normal: &Vector3<f64>,
) -> Result<Quadric<f64>> {
    if nb.len() < 6 {
        return Err(Error::InsufficientOverlap {
            found: nb.len(),
            required: 6,
        });
    }
    let base = Quadric::aligned_to_normal(nb.center, camera_facing_normal);
    let rot = base.rotation();
    let mut h = nalgebra::Matrix4::<f64>::zeros();
    let mut g = nalgebra::Vector4::<f64>::zeros();
    for member in &nb.members {
        let local = rot * (member - nb.center);
        let row = nalgebra::Vector4::new(
            1.0,
            0.5 * local.x * local.x,
            local.x * local.y,
            0.5 * local.y * local.y,
        );
        h += row * row.transpose();
        g += row * local.z;
    }
    let eigs = h.symmetric_eigenvalues();
    let max = eigs.amax();
    let rank = eigs.iter().filter(|l| l.abs() > max * 1e-12).count();
    if rank < 4 {
        return Err(Error::DegenerateFit { rank });
    }
    let sol = h
        .cholesky()
        .ok_or(Error::DegenerateFit { rank })?
        .solve(&g);
    Ok(Quadric::new(
        *base.anchor(),
        base.theta_x,
        base.theta_y,
        -sol[0],
        sol[1],
        sol[2],
        sol[3],
    ))
}

/// Iterative quadric fits over a stride grid of anchors; returns the fitted
/// quadrics and the per-anchor curvature map (the single-frame baseline).
pub fn fit_frame_quadrics(
    surface: &Surface,
    stride: usize,
    radius: RadiusPolicy,
    config: &SolverConfig,
) -> (Vec<Quadric<f64>>, CurvatureMap) {
    let anchors = anchor_pixels(surface, stride);
    let fits: Vec<Option<(usize, Quadric<f64>)>> = anchors
        .par_iter()
        .map(|&idx| {
            let anchor = *surface.point(idx);
            let normal = surface.normal(idx)?;
            let nb = surface.neighborhood(&anchor, radius.radius(anchor.z));
            if nb.len() < 6 {
                return None;
            }
            let init = Quadric::aligned_to_normal(anchor, normal);
            fit_quadric_iterative(&nb, &init, config)
                .ok()
                .map(|(fit, _)| (idx, fit))
        })
        .collect();
    collect_quadric_map(surface, fits)
}

/// One-shot least-squares fits over the same anchor grid (the `quad-ls`
/// baseline).
pub fn fit_frame_quadrics_ls(
    surface: &Surface,
    stride: usize,
    radius: RadiusPolicy,
) -> (Vec<Quadric<f64>>, CurvatureMap) {
    let anchors = anchor_pixels(surface, stride);
    let fits: Vec<Option<(usize, Quadric<f64>)>> = anchors
        .par_iter()
        .map(|&idx| {
            let anchor = *surface.point(idx);
            let normal = surface.normal(idx)?;
            let nb = surface.neighborhood(&anchor, radius.radius(anchor.z));
            if nb.len() < 6 {
                return None;
            }
            fit_quadric_ls(&nb, normal).ok().map(|fit| (idx, fit))
        })
        .collect();
    collect_quadric_map(surface, fits)
}

fn anchor_pixels(surface: &Surface, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut anchors = Vec::new();
    for v in (0..surface.height()).step_by(stride) {
        for u in (0..surface.width()).step_by(stride) {
            let idx = v * surface.width() + u;
            if surface.is_valid(idx) {
                anchors.push(idx);
            }
        }
    }
    anchors
}

fn collect_quadric_map(
    surface: &Surface,
    fits: Vec<Option<(usize, Quadric<f64>)>>,
) -> (Vec<Quadric<f64>>, CurvatureMap) {
    let mut quadrics = Vec::new();
    let mut map = CurvatureMap::new_invalid(surface.width(), surface.height());
    for fit in fits.into_iter().flatten() {
        let (idx, quadric) = fit;
        map.set(idx, quadric.principal_curvatures());
        quadrics.push(quadric);
    }
    (quadrics, map)
}

/// Dataset manifest: the unit of exchange between the generate, align and
/// eval commands. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: String,
    pub sigma_level: u32,
    pub seed: u64,
    pub step_m: f64,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
    pub truth_trajectory: String,
    pub truth_depth: Vec<String>,
    pub truth_curvature: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        if !path.exists() {
            return Err(Error::FileNotFound(path));
        }
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::format(path.display(), e.to_string()))
    }

    /// Loads the noisy frames as surfaces with normals.
    pub fn load_surfaces(&self, dir: &Path, normal_window: usize) -> Result<Vec<Surface>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(k, rel)| {
                let frame = DepthFrame::load(&dir.join(rel))?;
                Surface::backproject(&frame, k).with_normals(normal_window)
            })
            .collect()
    }

    pub fn load_truth_trajectory(&self, dir: &Path) -> Result<Vec<RigidTransform<f64>>> {
        let path = dir.join(&self.truth_trajectory);
        if !path.exists() {
            return Err(Error::FileNotFound(path));
        }
        let file = std::fs::File::open(&path)?;
        read_trajectory(std::io::BufReader::new(file))
    }
}

/// Experiment description consumed by `run_experiment` (and the `bench`
/// command). Methods: `icp-ftf`, `icp-bundle`, `q-full`, `j-ftf`, `j-full`,
/// `quad-it`, `quad-ls`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenes: Vec<String>,
    pub sigma_levels: Vec<u32>,
    pub methods: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_step_mm")]
    pub step_mm: f64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_radius_scale")]
    pub radius_scale: f64,
    #[serde(default = "default_normal_window")]
    pub normal_window: usize,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_frames() -> usize {
    5
}
fn default_step_mm() -> f64 {
    10.0
}
fn default_width() -> usize {
    160
}
fn default_height() -> usize {
    120
}
fn default_stride() -> usize {
    4
}
fn default_radius_scale() -> f64 {
    0.0125
}
fn default_normal_window() -> usize {
    5
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() || self.sigma_levels.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "experiment needs scenes, sigma_levels and seeds".into(),
            ));
        }
        if self.frames == 0 {
            return Err(Error::InvalidArgument("frames must be >= 1".into()));
        }
        for m in &self.methods {
            Method::parse(m)?;
        }
        for scene in &self.scenes {
            resolve_scene(scene)?;
        }
        Ok(())
    }
}

/// Resolves a scene argument: a builtin name or a path to a scene file.
pub fn resolve_scene(name: &str) -> Result<Scene> {
    if let Some(scene) = Scene::builtin(name) {
        return Ok(scene);
    }
    let path = Path::new(name);
    if path.exists() {
        return Scene::load(path);
    }
    Err(Error::FileNotFound(PathBuf::from(name)))
}

/// Evaluation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    IcpFtf,
    IcpBundle,
    QFull,
    JFtf,
    JFull,
    QuadIt,
    QuadLs,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        Ok(match name {
            "icp-ftf" => Method::IcpFtf,
            "icp-bundle" => Method::IcpBundle,
            "q-full" => Method::QFull,
            "j-ftf" => Method::JFtf,
            "j-full" => Method::JFull,
            "quad-it" => Method::QuadIt,
            "quad-ls" => Method::QuadLs,
            other => return Err(Error::UnknownMethod(other.into())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::IcpFtf => "icp-ftf",
            Method::IcpBundle => "icp-bundle",
            Method::QFull => "q-full",
            Method::JFtf => "j-ftf",
            Method::JFull => "j-full",
            Method::QuadIt => "quad-it",
            Method::QuadLs => "quad-ls",
        }
    }

    /// Methods that produce a trajectory.
    pub fn is_pose_method(&self) -> bool {
        !matches!(self, Method::QuadIt | Method::QuadLs)
    }

    /// Methods that produce a curvature map.
    pub fn is_curvature_method(&self) -> bool {
        matches!(
            self,
            Method::JFtf | Method::JFull | Method::QuadIt | Method::QuadLs
        )
    }

    /// Alignment methods accepted by the `align` command.
    pub fn alignment_methods() -> &'static [&'static str] {
        &["icp-ftf", "icp-bundle", "q-full", "j-ftf", "j-full"]
    }
}

/// In-memory dataset: noisy surfaces plus ground truth.
pub struct SyntheticDataset {
    pub scene_name: String,
    pub sigma_level: u32,
    pub seed: u64,
    pub surfaces: Vec<Surface>,
    pub truth_trajectory: Vec<RigidTransform<f64>>,
    /// Frame-0 ground-truth curvature, discontinuity-masked.
    pub truth_curvature: CurvatureMap,
}

/// Renders a noisy rail dataset for one (scene, sigma, seed) condition.
pub fn build_synthetic_dataset(
    scene: &Scene,
    sigma_level: u32,
    seed: u64,
    frames: usize,
    step_m: f64,
    width: usize,
    height: usize,
    normal_window: usize,
) -> Result<SyntheticDataset> {
    let intr = default_intrinsics(width, height);
    let rail = rail_trajectory(step_m, frames);
    let mut surfaces = Vec::with_capacity(frames);
    let mut truth_curvature = None;
    for (k, cam) in rail.iter().enumerate() {
        let (clean, truth) = render_depth(scene, cam, intr, width, height)?;
        if k == 0 {
            // Curvature truth is compared away from occlusion edges and from
            // surface folds, where it is not well defined.
            let depth_keep = discontinuity_mask(&clean, 0.05, 3);
            let fold_keep = normal_fold_mask(
                &truth.normals,
                &truth.normal_valid,
                width,
                height,
                10f64.to_radians(),
                3,
            );
            let keep: Vec<bool> = depth_keep
                .iter()
                .zip(&fold_keep)
                .map(|(a, b)| *a && *b)
                .collect();
            truth_curvature = Some(apply_mask(&truth.curvature, &keep));
        }
        let noisy = add_noise(&clean, &NoiseModel::for_frame(seed, sigma_level, k));
        surfaces.push(Surface::backproject(&noisy, k).with_normals(normal_window)?);
    }
    Ok(SyntheticDataset {
        scene_name: scene.name.clone(),
        sigma_level,
        seed,
        surfaces,
        truth_trajectory: rail,
        truth_curvature: truth_curvature.expect("at least one frame"),
    })
}

/// Output of one method on one dataset.
pub struct MethodOutput {
    pub trajectory: Option<Vec<RigidTransform<f64>>>,
    pub curvature: Option<CurvatureMap>,
    pub cost_trace: Vec<CostStep>,
}

/// Per-dataset shared context. The frame-0 iterative fits seed every quadric
/// method (exactly as each would compute them itself), and the ICP chain and
/// pose-graph results are computed once and shared by the methods that
/// consume them as initialization.
pub struct DatasetContext<'a> {
    pub dataset: &'a SyntheticDataset,
    pub stride: usize,
    pub radius: RadiusPolicy,
    s1_quadrics: Vec<Quadric<f64>>,
    s1_map: CurvatureMap,
    icp_relatives: std::sync::OnceLock<std::result::Result<IcpChain, String>>,
    bundle: std::sync::OnceLock<std::result::Result<(Vec<RigidTransform<f64>>, Vec<CostStep>), String>>,
}

#[derive(Clone)]
struct IcpChain {
    relatives: Vec<RigidTransform<f64>>,
    poses: Vec<RigidTransform<f64>>,
    trace: Vec<CostStep>,
}

impl<'a> DatasetContext<'a> {
    pub fn new(dataset: &'a SyntheticDataset, stride: usize, radius: RadiusPolicy) -> Self {
        let (s1_quadrics, s1_map) = fit_frame_quadrics(
            &dataset.surfaces[0],
            stride,
            radius,
            &SolverConfig::quadric_fit(),
        );
        Self {
            dataset,
            stride,
            radius,
            s1_quadrics,
            s1_map,
            icp_relatives: std::sync::OnceLock::new(),
            bundle: std::sync::OnceLock::new(),
        }
    }

    fn icp_ftf_chain(&self) -> Result<IcpChain> {
        self.icp_relatives
            .get_or_init(|| {
                let surfaces = &self.dataset.surfaces;
                let config = SolverConfig::icp();
                let mut relatives = Vec::new();
                let mut poses = vec![RigidTransform::identity()];
                let mut trace = Vec::new();
                for k in 1..surfaces.len() {
                    let result = icp_point_to_plane(
                        &surfaces[k],
                        &surfaces[k - 1],
                        &RigidTransform::identity(),
                        &config,
                    )
                    .map_err(|e| e.to_string())?;
                    trace.extend(result.cost_trace.iter().copied());
                    poses.push(poses[k - 1] * result.pose);
                    relatives.push(result.pose);
                }
                Ok(IcpChain {
                    relatives,
                    poses,
                    trace,
                })
            })
            .clone()
            .map_err(Error::InvalidArgument)
    }

    fn icp_bundle_poses(&self) -> Result<(Vec<RigidTransform<f64>>, Vec<CostStep>)> {
        let chain = self.icp_ftf_chain()?;
        self.bundle
            .get_or_init(|| {
                let surfaces = &self.dataset.surfaces;
                let pairs = default_pairs(surfaces.len(), 2);
                let result = icp_bundle(surfaces, &chain.poses, &pairs, &SolverConfig::icp())
                    .map_err(|e| e.to_string())?;
                let mut trace = chain.trace.clone();
                trace.extend(result.cost_trace.iter().copied());
                Ok((result.poses, trace))
            })
            .clone()
            .map_err(Error::InvalidArgument)
    }

    /// Runs one method on the dataset.
    pub fn run(&self, method: Method) -> Result<MethodOutput> {
        let surfaces = &self.dataset.surfaces;
        if method.is_pose_method() && surfaces.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} needs at least 2 frames",
                method.name()
            )));
        }
        match method {
            Method::IcpFtf => {
                let chain = self.icp_ftf_chain()?;
                Ok(MethodOutput {
                    trajectory: Some(chain.poses),
                    curvature: None,
                    cost_trace: chain.trace,
                })
            }
            Method::IcpBundle => {
                let (poses, trace) = self.icp_bundle_poses()?;
                Ok(MethodOutput {
                    trajectory: Some(poses),
                    curvature: None,
                    cost_trace: trace,
                })
            }
            Method::QuadIt => Ok(MethodOutput {
                trajectory: None,
                curvature: Some(self.s1_map.clone()),
                cost_trace: Vec::new(),
            }),
            Method::QuadLs => {
                let (_, map) =
                    fit_frame_quadrics_ls(&self.dataset.surfaces[0], self.stride, self.radius);
                Ok(MethodOutput {
                    trajectory: None,
                    curvature: Some(map),
                    cost_trace: Vec::new(),
                })
            }
            Method::JFtf => {
                let chain = self.icp_ftf_chain()?;
                let joint_config = SolverConfig::joint();
                let mut poses = vec![RigidTransform::identity()];
                let mut trace = chain.trace.clone();
                let mut curvature = None;
                for k in 1..surfaces.len() {
                    let quadrics = if k == 1 {
                        self.s1_quadrics.clone()
                    } else {
                        fit_frame_quadrics(
                            &surfaces[k - 1],
                            self.stride,
                            self.radius,
                            &SolverConfig::quadric_fit(),
                        )
                        .0
                    };
                    let joint = crate::joint::JointProblem::new(
                        vec![&surfaces[k - 1], &surfaces[k]],
                        vec![RigidTransform::identity(), chain.relatives[k - 1]],
                        quadrics,
                        joint_config,
                    )?
                    .with_radius_policy(self.radius)
                    .solve()?;
                    trace.extend(joint.cost_trace.iter().copied());
                    if k == 1 {
                        curvature = Some(joint.curvature.clone());
                    }
                    poses.push(poses[k - 1] * joint.poses[1]);
                }
                Ok(MethodOutput {
                    trajectory: Some(poses),
                    curvature,
                    cost_trace: trace,
                })
            }
            Method::JFull => {
                let (init, mut trace) = self.icp_bundle_poses()?;
                let result = crate::joint::JointProblem::new(
                    surfaces.iter().collect(),
                    init,
                    self.s1_quadrics.clone(),
                    SolverConfig::joint(),
                )?
                .with_radius_policy(self.radius)
                .solve()?;
                trace.extend(result.cost_trace.iter().copied());
                Ok(MethodOutput {
                    trajectory: Some(result.poses),
                    curvature: Some(result.curvature),
                    cost_trace: trace,
                })
            }
            Method::QFull => {
                let (init, mut trace) = self.icp_bundle_poses()?;
                let result = crate::joint::JointProblem::new(
                    surfaces.iter().collect(),
                    init,
                    self.s1_quadrics.clone(),
                    SolverConfig::joint(),
                )?
                .with_radius_policy(self.radius)
                .solve_poses_only()?;
                trace.extend(result.cost_trace.iter().copied());
                Ok(MethodOutput {
                    trajectory: Some(result.poses),
                    curvature: None,
                    cost_trace: trace,
                })
            }
        }
    }
}

/// Seed-averaged statistics for one (scene, sigma, method).
#[derive(Debug, Clone, Copy, Default)]
pub struct PoseStats {
    pub trans_rms: f64,
    pub rot_rms: f64,
}

/// Results for one (scene, sigma) condition, seed-averaged.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub scene: String,
    pub sigma_level: u32,
    pub pose: BTreeMap<String, PoseStats>,
    pub drift: BTreeMap<String, Vec<f64>>,
    pub curvature: BTreeMap<String, f64>,
}

/// Full experiment output (also written as CSV files when an output
/// directory is supplied).
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub conditions: Vec<ConditionReport>,
    /// Count of accepted solver steps that increased their frozen-weight
    /// cost; must be zero.
    pub monotone_violations: usize,
}

impl ExperimentReport {
    pub fn condition(&self, scene: &str, sigma: u32) -> Option<&ConditionReport> {
        self.conditions
            .iter()
            .find(|c| c.scene == scene && c.sigma_level == sigma)
    }
}

struct LongRow {
    scene: String,
    sigma: u32,
    seed: u64,
    method: &'static str,
    frame: usize,
    trans_abs: f64,
    rot_abs: f64,
    trans_rel: f64,
    rot_rel: f64,
}

/// Runs every method on every (scene, sigma, seed) condition and aggregates
/// pose, drift and curvature metrics; deterministic for fixed seeds.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let methods: Vec<Method> = spec
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_>>()?;
    let radius = RadiusPolicy::new(spec.radius_scale);
    let step_m = spec.step_mm / 1000.0;

    let mut conditions = Vec::new();
    let mut monotone_violations = 0usize;
    let mut long_rows: Vec<LongRow> = Vec::new();

    for scene_name in &spec.scenes {
        let scene = resolve_scene(scene_name)?;
        for &sigma in &spec.sigma_levels {
            let mut pose_acc: BTreeMap<&'static str, Vec<PoseStats>> = BTreeMap::new();
            let mut drift_acc: BTreeMap<&'static str, Vec<Vec<f64>>> = BTreeMap::new();
            let mut curv_acc: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();

            for &seed in &spec.seeds {
                let dataset = build_synthetic_dataset(
                    &scene,
                    sigma,
                    seed,
                    spec.frames,
                    step_m,
                    spec.width,
                    spec.height,
                    spec.normal_window,
                )?;
                let ctx = DatasetContext::new(&dataset, spec.stride, radius);
                for &method in &methods {
                    let output = ctx.run(method)?;
                    monotone_violations += output
                        .cost_trace
                        .iter()
                        .filter(|s| !s.is_non_increasing())
                        .count();
                    if let Some(traj) = &output.trajectory {
                        let report = pose_error(traj, &dataset.truth_trajectory)?;
                        pose_acc.entry(method.name()).or_default().push(PoseStats {
                            trans_rms: report.translational_rms,
                            rot_rms: report.rotational_rms,
                        });
                        let drift = drift_curve(traj, &dataset.truth_trajectory)?;
                        drift_acc
                            .entry(method.name())
                            .or_default()
                            .push(drift.per_frame.clone());
                        let rel = relative_errors(traj, &dataset.truth_trajectory);
                        for (frame, ((ta, ra), (tr, rr))) in
                            report.per_frame.iter().zip(&rel).enumerate()
                        {
                            long_rows.push(LongRow {
                                scene: scene_name.clone(),
                                sigma,
                                seed,
                                method: method.name(),
                                frame,
                                trans_abs: *ta,
                                rot_abs: *ra,
                                trans_rel: *tr,
                                rot_rel: *rr,
                            });
                        }
                    }
                    if let Some(map) = &output.curvature {
                        let rms = curvature_rms(map, &dataset.truth_curvature)?;
                        curv_acc.entry(method.name()).or_default().push(rms);
                    }
                }
            }

            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let pose: BTreeMap<String, PoseStats> = pose_acc
                .iter()
                .map(|(k, v)| {
                    (
                        k.to_string(),
                        PoseStats {
                            trans_rms: mean(&v.iter().map(|s| s.trans_rms).collect::<Vec<_>>()),
                            rot_rms: mean(&v.iter().map(|s| s.rot_rms).collect::<Vec<_>>()),
                        },
                    )
                })
                .collect();
            let drift: BTreeMap<String, Vec<f64>> = drift_acc
                .iter()
                .map(|(k, curves)| {
                    let frames = curves[0].len();
                    let avg: Vec<f64> = (0..frames)
                        .map(|f| mean(&curves.iter().map(|c| c[f]).collect::<Vec<_>>()))
                        .collect();
                    (k.to_string(), avg)
                })
                .collect();
            let curvature: BTreeMap<String, f64> = curv_acc
                .iter()
                .map(|(k, v)| (k.to_string(), mean(v)))
                .collect();

            conditions.push(ConditionReport {
                scene: scene_name.clone(),
                sigma_level: sigma,
                pose,
                drift,
                curvature,
            });
        }
    }

    let report = ExperimentReport {
        conditions,
        monotone_violations,
    };

    if let Some(dir) = out_dir {
        write_reports(spec, &report, &long_rows, dir)?;
    }
    Ok(report)
}

fn write_reports(
    spec: &ExperimentSpec,
    report: &ExperimentReport,
    long_rows: &[LongRow],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let single_sigma = spec.sigma_levels.len() == 1;

    for scene in &spec.scenes {
        let scene_dir = dir.join(scene_dir_name(scene));
        std::fs::create_dir_all(&scene_dir)?;

        let mut pose_csv = String::from("noise_level,method,trans_rms_m,rot_rms_rad\n");
        for &sigma in &spec.sigma_levels {
            let Some(cond) = report.condition(scene, sigma) else { continue };
            for method in &spec.methods {
                if let Some(stats) = cond.pose.get(method.as_str()) {
                    pose_csv.push_str(&format!(
                        "{},{},{},{}\n",
                        sigma, method, stats.trans_rms, stats.rot_rms
                    ));
                }
            }
        }
        std::fs::write(scene_dir.join("pose_rms.csv"), pose_csv)?;

        let mut long_csv = String::from(
            "noise_level,seed,method,frame,trans_abs_m,rot_abs_rad,trans_rel_m,rot_rel_rad\n",
        );
        for row in long_rows.iter().filter(|r| &r.scene == scene) {
            long_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.sigma,
                row.seed,
                row.method,
                row.frame,
                row.trans_abs,
                row.rot_abs,
                row.trans_rel,
                row.rot_rel
            ));
        }
        std::fs::write(scene_dir.join("pose_long.csv"), long_csv)?;

        for &sigma in &spec.sigma_levels {
            let Some(cond) = report.condition(scene, sigma) else { continue };
            let mut drift_csv = String::from("frame,method,drift_m\n");
            for method in &spec.methods {
                if let Some(curve) = cond.drift.get(method.as_str()) {
                    for (frame, value) in curve.iter().enumerate() {
                        drift_csv.push_str(&format!("{},{},{}\n", frame, method, value));
                    }
                }
            }
            let name = if single_sigma {
                "drift.csv".to_string()
            } else {
                format!("drift_s{sigma}.csv")
            };
            std::fs::write(scene_dir.join(name), drift_csv)?;
        }
    }

    let mut curv_csv = String::from("dataset,method,curv_rms\n");
    for cond in &report.conditions {
        for method in &spec.methods {
            if let Some(rms) = cond.curvature.get(method.as_str()) {
                curv_csv.push_str(&format!(
                    "{}_s{},{},{}\n",
                    scene_dir_name(&cond.scene),
                    cond.sigma_level,
                    method,
                    rms
                ));
            }
        }
    }
    std::fs::write(dir.join("curvature.csv"), curv_csv)?;
    Ok(())
}

fn scene_dir_name(scene: &str) -> String {
    Path::new(scene)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| scene.to_string())
}

/// Writes a trajectory file (used by the align command).
pub fn save_trajectory(path: &Path, poses: &[RigidTransform<f64>]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trajectory(&mut w, poses)?;
    w.flush()?;
    Ok(())
}
