//! Organized point sets backed by depth frames: back-projection, normal
//! estimation, radius neighbourhoods and projective data association.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadric::Neighborhood;

/// Valid (non-sentinel) depths must lie inside this open range, meters.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 20.0;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Projects a camera-frame point to pixel coordinates; `None` behind the
    /// camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-projects pixel `(u, v)` at depth `z`:
    /// `((u - cx) z / fx, (v - cy) z / fy, z)`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("fx and fy must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < width as f64 && self.cy >= 0.0 && self.cy < height as f64)
        {
            return Err(Error::InvalidArgument(
                "principal point must lie within image bounds".into(),
            ));
        }
        Ok(())
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DFRM";

/// Row-major depth grid in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    intrinsics: Intrinsics,
    depth: Vec<f32>,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        intrinsics: Intrinsics,
        depth: Vec<f32>,
    ) -> Result<Self> {
        intrinsics.validate(width, height)?;
        if depth.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth grid has {} entries for a {}x{} frame",
                depth.len(),
                width,
                height
            )));
        }
        for (i, &z) in depth.iter().enumerate() {
            let z = z as f64;
            if z != 0.0 && !(z > MIN_DEPTH && z < MAX_DEPTH) {
                return Err(Error::InvalidArgument(format!(
                    "depth {z} at pixel {i} outside ({MIN_DEPTH}, {MAX_DEPTH})"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            intrinsics,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.depth_at(u, v) != 0.0
    }

    /// Little-endian binary layout: magic `DFRM`, u32 width, u32 height,
    /// f64 fx, fy, cx, cy, then width*height f32 depths row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DEPTH_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for v in [
            self.intrinsics.fx,
            self.intrinsics.fy,
            self.intrinsics.cx,
            self.intrinsics.cy,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for z in &self.depth {
            w.write_all(&z.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DEPTH_MAGIC {
            return Err(Error::format("depth frame", "bad magic"));
        }
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf4)?;
        let width = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let height = u32::from_le_bytes(buf4) as usize;
        let mut intr = [0f64; 4];
        for slot in &mut intr {
            r.read_exact(&mut buf8)?;
            *slot = f64::from_le_bytes(buf8);
        }
        let mut depth = vec![0f32; width * height];
        for z in &mut depth {
            r.read_exact(&mut buf4)?;
            *z = f32::from_le_bytes(buf4);
        }
        Self::new(
            width,
            height,
            Intrinsics::new(intr[0], intr[1], intr[2], intr[3]),
            depth,
        )
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
}

/// A target point/normal returned by projective association.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub point: Point3<f64>,
    pub normal: Vector3<f64>,
    /// Euclidean gap between the query point and the associated point.
    pub gap: f64,
}

/// An organized point set: one 3D point per pixel with validity, plus
/// optional camera-facing unit normals. Immutable once normals are attached.
#[derive(Debug, Clone)]
pub struct Surface {
    frame_id: usize,
    width: usize,
    height: usize,
    intrinsics: Intrinsics,
    points: Vec<Point3<f64>>,
    valid: Vec<bool>,
    normals: Vec<Vector3<f64>>,
    normal_valid: Vec<bool>,
    has_normals: bool,
}

impl Surface {
    /// Back-projects every valid pixel of a depth frame.
    pub fn backproject(frame: &DepthFrame, frame_id: usize) -> Self {
        let n = frame.width * frame.height;
        let mut points = vec![Point3::origin(); n];
        let mut valid = vec![false; n];
        for v in 0..frame.height {
            for u in 0..frame.width {
                let idx = v * frame.width + u;
                let z = frame.depth[idx] as f64;
                if z != 0.0 {
                    points[idx] = frame.intrinsics.backproject(u as f64, v as f64, z);
                    valid[idx] = true;
                }
            }
        }
        Self {
            frame_id,
            width: frame.width,
            height: frame.height,
            intrinsics: frame.intrinsics,
            points,
            valid,
            normals: Vec::new(),
            normal_valid: Vec::new(),
            has_normals: false,
        }
    }

    /// Estimates a camera-facing unit normal per point from the covariance of
    /// the valid points in an odd `window x window` pixel neighbourhood.
    /// Pixels with fewer than 6 valid neighbours are marked normal-invalid.
    pub fn with_normals(mut self, window: usize) -> Result<Self> {
        if window < 3 || window % 2 == 0 {
            return Err(Error::InvalidArgument(
                "normal window must be odd and >= 3".into(),
            ));
        }
        let half = window / 2;
        let (w, h) = (self.width, self.height);
        let results: Vec<(Vector3<f64>, bool)> = (0..w * h)
            .into_par_iter()
            .map(|idx| {
                if !self.valid[idx] {
                    return (Vector3::zeros(), false);
                }
                let (u, v) = (idx % w, idx / w);
                let u_lo = u.saturating_sub(half);
                let u_hi = (u + half).min(w - 1);
                let v_lo = v.saturating_sub(half);
                let v_hi = (v + half).min(h - 1);

                let mut count = 0usize;
                let mut mean = Vector3::zeros();
                for vv in v_lo..=v_hi {
                    for uu in u_lo..=u_hi {
                        let i = vv * w + uu;
                        if self.valid[i] {
                            mean += self.points[i].coords;
                            count += 1;
                        }
                    }
                }
                if count < 6 {
                    return (Vector3::zeros(), false);
                }
                mean /= count as f64;
                let mut cov = Matrix3::zeros();
                for vv in v_lo..=v_hi {
                    for uu in u_lo..=u_hi {
                        let i = vv * w + uu;
                        if self.valid[i] {
                            let d = self.points[i].coords - mean;
                            cov += d * d.transpose();
                        }
                    }
                }
                let eig = cov.symmetric_eigen();
                let mut smallest = 0;
                for k in 1..3 {
                    if eig.eigenvalues[k] < eig.eigenvalues[smallest] {
                        smallest = k;
                    }
                }
                let mut n = eig.eigenvectors.column(smallest).into_owned();
                let norm = n.norm();
                if norm == 0.0 {
                    return (Vector3::zeros(), false);
                }
                n /= norm;
                // Orient toward the camera.
                if n.dot(&self.points[idx].coords) > 0.0 {
                    n = -n;
                }
                (n, true)
            })
            .collect();

        self.normals = results.iter().map(|(n, _)| *n).collect();
        self.normal_valid = results.iter().map(|(_, ok)| *ok).collect();
        self.has_normals = true;
        Ok(self)
    }

    pub fn frame_id(&self) -> usize {
        self.frame_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn has_normals(&self) -> bool {
        self.has_normals
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn point(&self, idx: usize) -> &Point3<f64> {
        &self.points[idx]
    }

    /// The stored normal, if this pixel has a valid one.
    pub fn normal(&self, idx: usize) -> Option<&Vector3<f64>> {
        (self.has_normals && self.normal_valid[idx]).then(|| &self.normals[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.points.len()).filter(|&i| self.valid[i])
    }

    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        self.intrinsics.project(p)
    }

    fn pixel_in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Gathers all valid points within a Euclidean `radius` of `center` by
    /// scanning a conservative pixel window around the center's projection.
    /// A center behind the camera or projecting outside the image yields an
    /// empty neighbourhood.
    pub fn neighborhood(&self, center: &Point3<f64>, radius: f64) -> Neighborhood<f64> {
        assert!(radius > 0.0, "radius must be positive");
        let empty = Neighborhood::new(*center, Vec::new());
        let Some((uc, vc)) = self.project(center) else {
            return empty;
        };
        if !self.pixel_in_bounds(uc, vc) {
            return empty;
        }

        let z_lo = center.z - radius;
        let (u_range, v_range) = if z_lo <= MIN_DEPTH * 0.5 {
            ((0, self.width - 1), (0, self.height - 1))
        } else {
            let z_hi = center.z + radius;
            let bound = |c: f64, f: f64, principal: f64, limit: usize| {
                let hi_ratio = if c + radius >= 0.0 {
                    (c + radius) / z_lo
                } else {
                    (c + radius) / z_hi
                };
                let lo_ratio = if c - radius <= 0.0 {
                    (c - radius) / z_lo
                } else {
                    (c - radius) / z_hi
                };
                let lo = (principal + f * lo_ratio).floor() as isize - 1;
                let hi = (principal + f * hi_ratio).ceil() as isize + 1;
                (
                    lo.clamp(0, limit as isize - 1) as usize,
                    hi.clamp(0, limit as isize - 1) as usize,
                )
            };
            (
                bound(center.x, self.intrinsics.fx, self.intrinsics.cx, self.width),
                bound(center.y, self.intrinsics.fy, self.intrinsics.cy, self.height),
            )
        };

        let mut members = Vec::new();
        let r2 = radius * radius;
        for v in v_range.0..=v_range.1 {
            for u in u_range.0..=u_range.1 {
                let idx = v * self.width + u;
                if self.valid[idx] && (self.points[idx] - center).norm_squared() <= r2 {
                    members.push(self.points[idx]);
                }
            }
        }
        Neighborhood::new(*center, members)
    }

    /// Projective data association: projects `p` into the grid and returns
    /// the valid point/normal at the nearest pixel, gated on the Euclidean
    /// gap and, when a source normal is supplied, on the normal angle.
    pub fn closest_point_projective(
        &self,
        p: &Point3<f64>,
        source_normal: Option<&Vector3<f64>>,
        gap_reject: f64,
        angle_reject: f64,
    ) -> Option<Correspondence> {
        let (u, v) = self.project(p)?;
        if !self.pixel_in_bounds(u, v) {
            return None;
        }
        let (u, v) = (u.round() as usize, v.round() as usize);
        let idx = v * self.width + u;
        if !self.valid[idx] {
            return None;
        }
        let normal = *self.normal(idx)?;
        let point = self.points[idx];
        let gap = (point - p).norm();
        if gap > gap_reject {
            return None;
        }
        if let Some(sn) = source_normal {
            if sn.dot(&normal) < angle_reject.cos() {
                return None;
            }
        }
        Some(Correspondence { point, normal, gap })
    }

    /// ASCII PLY export with `x y z nx ny nz` properties, one vertex per
    /// valid point (zeros for missing normals).
    pub fn write_ply<W: Write>(&self, mut w: W) -> Result<()> {
        let count = self.valid_count();
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {count}")?;
        for prop in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(w, "property float {prop}")?;
        }
        writeln!(w, "end_header")?;
        for idx in self.valid_indices() {
            let p = self.points[idx];
            let n = self
                .normal(idx)
                .copied()
                .unwrap_or_else(Vector3::zeros);
            writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_frame(width: usize, height: usize, z: f32) -> DepthFrame {
        let intr = Intrinsics::new(100.0, 100.0, width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5);
        DepthFrame::new(width, height, intr, vec![z; width * height]).unwrap()
    }

    #[test]
    fn backproject_principal_point() {
        let intr = Intrinsics::new(120.0, 110.0, 32.0, 24.0);
        let mut depth = vec![0.0f32; 64 * 48];
        depth[24 * 64 + 32] = 2.5;
        let frame = DepthFrame::new(64, 48, intr, depth).unwrap();
        let s = Surface::backproject(&frame, 0);
        let idx = 24 * 64 + 32;
        assert!(s.is_valid(idx));
        assert_eq!(*s.point(idx), Point3::new(0.0, 0.0, 2.5));
        assert_eq!(s.valid_count(), 1);
    }

    #[test]
    fn zero_depth_is_invalid() {
        let frame = plane_frame(8, 6, 1.0);
        let mut depth = frame.depth().to_vec();
        depth[0] = 0.0;
        let frame = DepthFrame::new(8, 6, *frame.intrinsics(), depth).unwrap();
        let s = Surface::backproject(&frame, 0);
        assert!(!s.is_valid(0));
        assert_eq!(s.valid_count(), 47);
    }

    #[test]
    fn unit_focal_geometry() {
        let intr = Intrinsics::new(30.0, 30.0, 10.0, 10.0);
        let mut depth = vec![0.0f32; 64 * 32];
        depth[10 * 64 + 40] = 1.0; // pixel (cx + fx, cy)
        let frame = DepthFrame::new(64, 32, intr, depth).unwrap();
        let s = Surface::backproject(&frame, 0);
        assert_eq!(*s.point(10 * 64 + 40), Point3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn project_backproject_roundtrip() {
        let frame = plane_frame(32, 24, 2.0);
        let s = Surface::backproject(&frame, 0);
        for idx in s.valid_indices() {
            let (u, v) = s.project(s.point(idx)).unwrap();
            let (eu, ev) = ((idx % 32) as f64, (idx / 32) as f64);
            assert!((u - eu).abs() < 1e-6 && (v - ev).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_frame_rejects_out_of_range() {
        let intr = Intrinsics::new(100.0, 100.0, 4.0, 4.0);
        assert!(DepthFrame::new(8, 8, intr, vec![25.0; 64]).is_err());
        assert!(DepthFrame::new(8, 8, intr, vec![0.05; 64]).is_err());
        assert!(DepthFrame::new(8, 8, Intrinsics::new(-1.0, 1.0, 4.0, 4.0), vec![0.0; 64]).is_err());
    }

    #[test]
    fn plane_normals_face_camera() {
        let frame = plane_frame(32, 24, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(5).unwrap();
        for idx in 0..32 * 24 {
            let n = s.normal(idx).expect("normal valid on dense plane");
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
            assert!(n.dot(&s.point(idx).coords) < 0.0);
        }
    }

    #[test]
    fn sphere_normals_match_analytic_oracle() {
        // Sphere centered on the optical axis; oracle: radial direction.
        let intr = Intrinsics::new(200.0, 200.0, 31.5, 31.5);
        let center = Point3::new(0.0, 0.0, 3.0);
        let radius = 1.0;
        let mut depth = vec![0.0f32; 64 * 64];
        for v in 0..64 {
            for u in 0..64 {
                let dx = (u as f64 - intr.cx) / intr.fx;
                let dy = (v as f64 - intr.cy) / intr.fy;
                // Ray p(t) = t (dx, dy, 1); nearest sphere hit.
                let a = dx * dx + dy * dy + 1.0;
                let b = -2.0 * center.z;
                let c = center.z * center.z - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc > 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    if t > 0.0 {
                        depth[v * 64 + u] = t as f32;
                    }
                }
            }
        }
        let frame = DepthFrame::new(64, 64, intr, depth).unwrap();
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        let mut checked = 0;
        for idx in s.valid_indices() {
            if let Some(n) = s.normal(idx) {
                let radial = (s.point(idx) - center).normalize();
                let cos = n.dot(&radial).abs();
                // Interior pixels only: the silhouette has one-sided support.
                let (u, v) = (idx % 64, idx / 64);
                let r_px = (((u as f64 - 31.5).powi(2) + (v as f64 - 31.5).powi(2)) as f64).sqrt();
                if r_px < 50.0 {
                    assert!(cos > 1.0 - 1e-3, "pixel {idx}: cos={cos}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let intr = Intrinsics::new(100.0, 100.0, 4.0, 4.0);
        let mut depth = vec![0.0f32; 81];
        depth[4 * 9 + 4] = 2.0;
        let frame = DepthFrame::new(9, 9, intr, depth).unwrap();
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        assert!(s.normal(4 * 9 + 4).is_none());
    }

    #[test]
    fn neighborhood_matches_linear_scan_oracle() {
        let frame = plane_frame(48, 36, 2.0);
        let s = Surface::backproject(&frame, 0);
        for (cx, cy, r) in [(0.0, 0.0, 0.05), (0.3, -0.2, 0.11), (-0.4, 0.1, 0.03)] {
            let center = Point3::new(cx, cy, 2.0);
            let nb = s.neighborhood(&center, r);
            let brute: Vec<Point3<f64>> = s
                .valid_indices()
                .map(|i| *s.point(i))
                .filter(|p| (p - center).norm() <= r)
                .collect();
            assert_eq!(nb.len(), brute.len(), "r={r}");
            for p in &nb.members {
                assert!((p - center).norm() <= r);
            }
        }
    }

    #[test]
    fn neighborhood_outside_image_is_empty() {
        let frame = plane_frame(16, 12, 2.0);
        let s = Surface::backproject(&frame, 0);
        assert!(s.neighborhood(&Point3::new(50.0, 0.0, 2.0), 0.05).is_empty());
        assert!(s.neighborhood(&Point3::new(0.0, 0.0, -1.0), 0.05).is_empty());
    }

    #[test]
    fn self_association_returns_same_point() {
        let frame = plane_frame(16, 12, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(5).unwrap();
        for idx in s.valid_indices() {
            let p = *s.point(idx);
            let c = s
                .closest_point_projective(&p, None, 0.1, 0.6)
                .expect("self association");
            assert_eq!(c.point, p);
            assert_eq!(c.gap, 0.0);
        }
    }

    #[test]
    fn association_behind_camera_is_none() {
        let frame = plane_frame(16, 12, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        assert!(s
            .closest_point_projective(&Point3::new(0.0, 0.0, -2.0), None, 0.1, 0.6)
            .is_none());
    }

    #[test]
    fn association_gap_matches_plane_oracle() {
        // Query a point on a pixel ray in front of a frontal plane: the gap
        // is exactly the depth offset times the ray length.
        let frame = plane_frame(32, 24, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        let intr = s.intrinsics();
        let (u, v) = (20.0, 14.0);
        let q = intr.backproject(u, v, 1.96);
        let c = s
            .closest_point_projective(&q, None, 0.2, 1.0)
            .expect("association");
        let dir = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        let expected = (2.0 - 1.96) * dir.norm();
        assert!(
            (c.gap - expected).abs() < 1e-12,
            "gap={} expected={expected}",
            c.gap
        );
    }

    #[test]
    fn association_respects_gap_gate() {
        let frame = plane_frame(16, 12, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        let q = Point3::new(0.0, 0.0, 1.5);
        assert!(s.closest_point_projective(&q, None, 0.1, 1.0).is_none());
        assert!(s.closest_point_projective(&q, None, 0.6, 1.0).is_some());
    }

    #[test]
    fn association_respects_normal_gate() {
        let frame = plane_frame(16, 12, 2.0);
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        let q = Point3::new(0.0, 0.0, 1.99);
        let tilted = Vector3::new(1.0, 0.0, -1.0).normalize();
        assert!(s
            .closest_point_projective(&q, Some(&tilted), 0.1, 0.5)
            .is_none());
        let aligned = Vector3::new(0.0, 0.0, -1.0);
        assert!(s
            .closest_point_projective(&q, Some(&aligned), 0.1, 0.5)
            .is_some());
    }

    #[test]
    fn depth_frame_binary_roundtrip() {
        let frame = plane_frame(8, 6, 1.25);
        let mut buf = Vec::new();
        frame.write_binary(&mut buf).unwrap();
        let back = DepthFrame::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.width(), 8);
        assert_eq!(back.height(), 6);
        assert_eq!(back.depth(), frame.depth());
        assert_eq!(back.intrinsics(), frame.intrinsics());
    }

    #[test]
    fn ply_export_counts_vertices() {
        let frame = plane_frame(4, 3, 1.0);
        let s = Surface::backproject(&frame, 0).with_normals(3).unwrap();
        let mut buf = Vec::new();
        s.write_ply(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("element vertex 12"));
        assert_eq!(text.lines().count(), 10 + 12);
    }
}
