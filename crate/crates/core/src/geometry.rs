//! Depth images, point clouds, unit-cube normalization and the scale space.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Rotation3, SymmetricEigen, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Depth unit of the on-disk raw format, in millimetres.
pub const RAW_DEPTH_SCALE_MM: f64 = 0.1;

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "intrinsics need fx, fy > 0, got fx = {}, fy = {}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Sub-pixel image coordinates of a camera-frame point.
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Intrinsics of the sub-image whose top-left pixel is `(u0, v0)`.
    pub fn cropped(&self, u0: usize, v0: usize) -> Self {
        Self {
            cx: self.cx - u0 as f64,
            cy: self.cy - v0 as f64,
            ..*self
        }
    }
}

/// Axis-aligned pixel rectangle, `[u0, u0 + width) x [v0, v0 + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.u0 && v >= self.v0 && u < self.u0 + self.width && v < self.v0 + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Metric depth map; a value of zero marks a pixel without measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    intrinsics: Intrinsics,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth_scale: f64,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize, intrinsics: Intrinsics) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            intrinsics,
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "depth buffer has {} values, expected {width}x{height}",
                depth.len()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid depth value {bad}")));
        }
        Ok(Self {
            width,
            height,
            depth,
            intrinsics,
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

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    /// Writes a depth value; negative or non-finite values are stored as 0.
    #[inline]
    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        self.depth[v * self.width + u] = if z.is_finite() && z > 0.0 { z } else { 0.0 };
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.get(u, v) > 0.0
    }

    /// Tight box around the valid pixels.
    pub fn valid_bbox(&self) -> Option<PixelRect> {
        let (mut umin, mut vmin, mut umax, mut vmax) = (usize::MAX, usize::MAX, 0, 0);
        for v in 0..self.height {
            for u in 0..self.width {
                if self.is_valid(u, v) {
                    umin = umin.min(u);
                    umax = umax.max(u);
                    vmin = vmin.min(v);
                    vmax = vmax.max(v);
                }
            }
        }
        (umin != usize::MAX).then(|| PixelRect {
            u0: umin,
            v0: vmin,
            width: umax - umin + 1,
            height: vmax - vmin + 1,
        })
    }

    /// Sub-image with intrinsics shifted so backprojection is unchanged.
    /// The rectangle is clipped to the image.
    pub fn crop(&self, rect: PixelRect) -> DepthImage {
        let u0 = rect.u0.min(self.width);
        let v0 = rect.v0.min(self.height);
        let u1 = (rect.u0 + rect.width).min(self.width);
        let v1 = (rect.v0 + rect.height).min(self.height);
        let (w, h) = (u1 - u0, v1 - v0);
        let mut depth = Vec::with_capacity(w * h);
        for v in v0..v1 {
            depth.extend_from_slice(&self.depth[v * self.width + u0..v * self.width + u1]);
        }
        DepthImage {
            width: w,
            height: h,
            depth,
            intrinsics: self.intrinsics.cropped(u0, v0),
        }
    }

    /// Writes `path` (16-bit little-endian raw, 0.1 mm units) and its JSON
    /// sidecar at `path` with extension `json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.depth.len() * 2);
        for d in &self.depth {
            let units = (d / RAW_DEPTH_SCALE_MM).round();
            if units > u16::MAX as f64 {
                return Err(Error::Format(format!("depth {d} mm overflows 16-bit raw")));
            }
            bytes.extend_from_slice(&(units as u16).to_le_bytes());
        }
        fs::write(path, bytes)?;
        let header = RawHeader {
            width: self.width,
            height: self.height,
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            depth_scale: RAW_DEPTH_SCALE_MM,
        };
        let mut json = serde_json::to_string_pretty(&header)?;
        json.push('\n');
        fs::write(path.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: RawHeader = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() != header.width * header.height * 2 {
            return Err(Error::Format(format!(
                "{}: {} bytes for a {}x{} depth image",
                path.display(),
                bytes.len(),
                header.width,
                header.height
            )));
        }
        if !(header.depth_scale > 0.0) {
            return Err(Error::Format(format!("depth_scale {}", header.depth_scale)));
        }
        let depth = bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64 * header.depth_scale)
            .collect();
        let intrinsics = Intrinsics::new(header.fx, header.fy, header.cx, header.cy);
        DepthImage::from_vec(header.width, header.height, depth, intrinsics)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Metric,
    UnitCube,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn metric(points: Vec<Point3>) -> Self {
        Self {
            points,
            frame: Frame::Metric,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-axis (min, max).
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }
}

/// A metric cloud together with the source pixel of every point.
#[derive(Clone, Debug)]
pub struct Backprojection {
    pub cloud: PointCloud,
    pub pixels: Vec<(u32, u32)>,
}

/// One 3D point per valid pixel, in row-major pixel order.
pub fn backproject(image: &DepthImage) -> Result<Backprojection> {
    image.intrinsics.validate()?;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..image.height {
        for u in 0..image.width {
            let z = image.get(u, v);
            if z > 0.0 {
                points.push(image.intrinsics.backproject(u as f64, v as f64, z));
                pixels.push((u as u32, v as u32));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud("depth image has no valid pixel"));
    }
    Ok(Backprojection {
        cloud: PointCloud::metric(points),
        pixels,
    })
}

/// `s_i = base^i` for `i = 0..count`.
pub fn geometric_scales(base: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| base.powi(i as i32)).collect()
}

#[derive(Clone, Debug)]
pub struct ScaleLevel {
    pub scale: f64,
    pub cloud: PointCloud,
    /// Depth extent of the normalized cloud.
    pub h: f64,
    pub pixels: Vec<(u32, u32)>,
}

#[derive(Clone, Debug)]
pub struct ScaleSpace {
    pub levels: Vec<ScaleLevel>,
    /// Largest metric axis extent of the source cloud (mm).
    pub alpha: f64,
    /// Metric point mapped to the cube center (0.5, 0.5, 0.5).
    pub center: Point3,
    /// The source cloud, index-aligned with every level.
    pub metric: Vec<Point3>,
}

impl ScaleSpace {
    pub fn to_unit(&self, scale: f64, p: &Point3) -> Point3 {
        let c = (p - self.center) / (scale * self.alpha);
        Point3::new(c.x + 0.5, c.y + 0.5, c.z + 0.5)
    }

    pub fn to_metric(&self, scale: f64, q: &Point3) -> Point3 {
        self.center + (q - Point3::new(0.5, 0.5, 0.5)) * (scale * self.alpha)
    }
}

/// Maps the cloud into the unit cube once per scale constant:
/// `(X - c) / (s * alpha) + 0.5`, with `alpha` the largest axis extent and `c`
/// the bounding-box center, so the `s = 1` cloud touches both faces of its
/// dominant axis.
pub fn normalize_scale_space(
    cloud: &PointCloud,
    pixels: &[(u32, u32)],
    scales: &[f64],
) -> Result<ScaleSpace> {
    if cloud.frame != Frame::Metric {
        return Err(Error::InvalidParameter("scale space needs a metric cloud".into()));
    }
    if pixels.len() != cloud.len() {
        return Err(Error::InvalidParameter("pixel map length differs from cloud".into()));
    }
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud("cannot normalize"))?;
    match scales.first() {
        Some(s) if *s == 1.0 => {}
        _ => return Err(Error::InvalidParameter("scale constants must start at 1".into())),
    }
    if scales.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("scale constants must strictly increase".into()));
    }
    let extent = hi - lo;
    let alpha = extent.x.max(extent.y).max(extent.z);
    if !(alpha > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let center = Point3::from((lo.coords + hi.coords) * 0.5);
    let mut space = ScaleSpace {
        levels: Vec::with_capacity(scales.len()),
        alpha,
        center,
        metric: cloud.points.clone(),
    };
    for &scale in scales {
        let points: Vec<Point3> = cloud
            .points
            .iter()
            .map(|p| {
                let q = space.to_unit(scale, p);
                Point3::new(q.x.clamp(0.0, 1.0), q.y.clamp(0.0, 1.0), q.z.clamp(0.0, 1.0))
            })
            .collect();
        let (zmin, zmax) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.z), b.max(p.z)));
        space.levels.push(ScaleLevel {
            scale,
            cloud: PointCloud {
                points,
                frame: Frame::UnitCube,
            },
            h: zmax - zmin,
            pixels: pixels.to_vec(),
        });
    }
    Ok(space)
}

#[derive(Clone, Debug)]
pub struct Normals {
    pub normals: Vec<Vector3>,
    /// Points whose neighbourhood was collinear and got the (0, 0, -1) fallback.
    pub fallback: Vec<bool>,
}

/// Plane-fit normals over the `k` nearest neighbours (the point included),
/// oriented into the negative-Z half-space (toward the camera).
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<Normals> {
    use rstar::primitives::GeomWithData;
    use rstar::RTree;

    if k < 3 || cloud.len() <= k {
        return Err(Error::InvalidParameter(format!(
            "normal estimation needs cloud size > k >= 3 (size {}, k {k})",
            cloud.len()
        )));
    }
    let entries: Vec<GeomWithData<[f64; 3], usize>> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i))
        .collect();
    let tree = RTree::bulk_load(entries);

    let mut normals = Vec::with_capacity(cloud.len());
    let mut fallback = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let neighbours: Vec<Point3> = tree
            .nearest_neighbor_iter(&[p.x, p.y, p.z])
            .take(k)
            .map(|e| cloud.points[e.data])
            .collect();
        match plane_normal(&neighbours) {
            Some(mut n) => {
                if n.z > 0.0 {
                    n = -n;
                }
                normals.push(n);
                fallback.push(false);
            }
            None => {
                normals.push(Vector3::new(0.0, 0.0, -1.0));
                fallback.push(true);
            }
        }
    }
    Ok(Normals { normals, fallback })
}

/// Smallest-eigenvalue direction of the neighbourhood covariance, or `None`
/// when the neighbourhood does not span a plane.
fn plane_normal(points: &[Point3]) -> Option<Vector3> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 0.0) || middle <= largest * 1e-10 {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rigid object pose in the camera frame: object-center translation (mm) and
/// roll-pitch-yaw rotation (rad), `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl Pose {
    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        Self {
            translation,
            rotation: rotation.map(wrap_angle),
        }
    }

    pub fn identity_at(translation: [f64; 3]) -> Self {
        Self::new(translation, [0.0; 3])
    }

    pub fn translation_vector(&self) -> Vector3 {
        Vector3::from(self.translation)
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        let [roll, pitch, yaw] = self.rotation;
        Rotation3::from_euler_angles(roll, pitch, yaw)
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.translation_vector()),
            UnitQuaternion::from_rotation_matrix(&self.rotation_matrix()),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (roll, pitch, yaw) = iso.rotation.euler_angles();
        let t = iso.translation.vector;
        Self::new([t.x, t.y, t.z], [roll, pitch, yaw])
    }

    /// Rotation first, then translation.
    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation_matrix() * p + self.translation_vector()
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().chain(&self.rotation).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(525.0, 525.0, 2.0, 1.0)
    }

    #[test]
    fn principal_ray_and_unit_tangent() {
        let mut img = DepthImage::zeros(5, 3, intr());
        img.set(2, 1, 750.0);
        let bp = backproject(&img).unwrap();
        assert_eq!(bp.cloud.points[0], Point3::new(0.0, 0.0, 750.0));

        let wide = Intrinsics::new(2.0, 2.0, 1.0, 0.0);
        let mut img = DepthImage::zeros(4, 1, wide);
        img.set(3, 0, 500.0);
        let bp = backproject(&img).unwrap();
        assert_eq!(bp.cloud.points[0], Point3::new(500.0, 0.0, 500.0));
        assert_eq!(bp.pixels, vec![(3, 0)]);
    }

    #[test]
    fn zero_pixels_are_skipped() {
        let img = DepthImage::from_vec(3, 1, vec![700.0, 0.0, 710.0], intr()).unwrap();
        let bp = backproject(&img).unwrap();
        assert_eq!(bp.cloud.len(), 2);
        assert_eq!(bp.pixels.len(), 2);
        assert!(matches!(
            backproject(&DepthImage::zeros(4, 4, intr())),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn bad_intrinsics_rejected() {
        let mut img = DepthImage::zeros(2, 2, Intrinsics::new(0.0, 1.0, 0.0, 0.0));
        img.set(0, 0, 1.0);
        assert!(backproject(&img).is_err());
    }

    #[test]
    fn reprojection_recovers_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = DepthImage::zeros(40, 30, Intrinsics::new(525.0, 520.0, 19.5, 14.5));
        for v in 0..30 {
            for u in 0..40 {
                if rng.gen_bool(0.7) {
                    img.set(u, v, rng.gen_range(400.0..1200.0));
                }
            }
        }
        let bp = backproject(&img).unwrap();
        for (p, (u, v)) in bp.cloud.points.iter().zip(&bp.pixels) {
            let (pu, pv) = img.intrinsics().project(p);
            assert!((pu - *u as f64).abs() < 0.5 && (pv - *v as f64).abs() < 0.5);
        }
    }

    #[test]
    fn two_point_cloud_hits_cube_faces() {
        let cloud = PointCloud::metric(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let px = [(0, 0), (1, 0)];
        let space = normalize_scale_space(&cloud, &px, &[1.0, 2.0]).unwrap();
        assert_eq!(space.alpha, 1.0);
        let l0 = &space.levels[0].cloud.points;
        assert_eq!(l0[0], Point3::new(0.0, 0.5, 0.5));
        assert_eq!(l0[1], Point3::new(1.0, 0.5, 0.5));
        assert_eq!(space.levels[0].h, 0.0);
        let l1 = &space.levels[1].cloud.points;
        assert_eq!((l1[0].x, l1[1].x), (0.25, 0.75));
    }

    #[test]
    fn random_cloud_recomputed_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point3> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-40.0..60.0),
                    rng.gen_range(10.0..30.0),
                    rng.gen_range(700.0..760.0),
                )
            })
            .collect();
        let px = vec![(0, 0); pts.len()];
        let space = normalize_scale_space(&PointCloud::metric(pts.clone()), &px, &[1.0]).unwrap();
        // Recompute straight from the definition.
        let (mut lo, mut hi) = ([f64::MAX; 3], [f64::MIN; 3]);
        for p in &pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let alpha = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let dominant = (0..3).max_by(|a, b| (hi[*a] - lo[*a]).total_cmp(&(hi[*b] - lo[*b]))).unwrap();
        let out = &space.levels[0].cloud.points;
        for (p, q) in pts.iter().zip(out) {
            for a in 0..3 {
                let expect = (p[a] - 0.5 * (lo[a] + hi[a])) / alpha + 0.5;
                assert_abs_diff_eq!(q[a], expect, epsilon = 1e-12);
                assert!((0.0..=1.0).contains(&q[a]));
            }
        }
        assert!(out.iter().any(|q| q[dominant] == 0.0));
        assert!(out.iter().any(|q| q[dominant] == 1.0));
    }

    #[test]
    fn scale_times_h_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..200)
            .map(|_| Point3::new(rng.gen_range(0.0..80.0), rng.gen_range(0.0..50.0), rng.gen_range(720.0..770.0)))
            .collect();
        let px = vec![(0, 0); pts.len()];
        let scales = geometric_scales(1.15, 9);
        let space = normalize_scale_space(&PointCloud::metric(pts), &px, &scales).unwrap();
        let h0 = space.levels[0].h;
        for w in space.levels.windows(2) {
            assert!(w[1].h < w[0].h);
        }
        for l in &space.levels {
            assert_abs_diff_eq!(l.h * l.scale, h0, epsilon = 1e-9);
        }
    }

    #[test]
    fn renormalizing_a_normalized_cloud_stays_in_cube() {
        let cloud = PointCloud::metric(vec![
            Point3::new(3.0, 1.0, 2.0),
            Point3::new(-1.0, 4.0, 0.0),
            Point3::new(0.5, 0.5, 9.0),
        ]);
        let px = vec![(0, 0); 3];
        let once = normalize_scale_space(&cloud, &px, &[1.0]).unwrap();
        let again = normalize_scale_space(&PointCloud::metric(once.levels[0].cloud.points.clone()), &px, &[1.0]).unwrap();
        for p in &again.levels[0].cloud.points {
            assert!(p.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn identical_points_are_degenerate() {
        let cloud = PointCloud::metric(vec![Point3::new(1.0, 2.0, 3.0); 4]);
        let px = vec![(0, 0); 4];
        assert!(matches!(normalize_scale_space(&cloud, &px, &[1.0]), Err(Error::DegenerateCloud)));
        let two = PointCloud::metric(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        assert!(normalize_scale_space(&two, &px[..2], &[2.0]).is_err());
    }

    fn plane(n: usize) -> PointCloud {
        PointCloud::metric(
            (0..n * n)
                .map(|i| Point3::new((i % n) as f64 * 2.0, (i / n) as f64 * 2.0, 750.0))
                .collect(),
        )
    }

    #[test]
    fn plane_normals_face_camera() {
        let cloud = plane(12);
        let normals = estimate_normals(&cloud, 8).unwrap();
        for n in &normals.normals {
            assert_abs_diff_eq!(*n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
        }
        let global = estimate_normals(&cloud, cloud.len() - 1).unwrap();
        assert_eq!(normals.normals, global.normals);
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Point3::new(0.0, 0.0, 800.0);
        let pts: Vec<Point3> = (0..2000)
            .map(|_| {
                let d = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                c + d.normalize() * 100.0
            })
            .collect();
        let cloud = PointCloud::metric(pts);
        let normals = estimate_normals(&cloud, 12).unwrap();
        let good = cloud
            .points
            .iter()
            .zip(&normals.normals)
            .filter(|(p, n)| n.dot(&(*p - c).normalize()).abs() >= 5f64.to_radians().cos())
            .count();
        assert!(good as f64 >= 0.95 * cloud.len() as f64, "{good}");
    }

    #[test]
    fn collinear_neighbourhood_falls_back() {
        let cloud = PointCloud::metric((0..10).map(|i| Point3::new(i as f64, 0.0, 700.0)).collect());
        let normals = estimate_normals(&cloud, 4).unwrap();
        assert!(normals.fallback.iter().all(|f| *f));
        assert!(normals.normals.iter().all(|n| *n == Vector3::new(0.0, 0.0, -1.0)));
        assert!(estimate_normals(&cloud, 2).is_err());
        assert!(estimate_normals(&cloud, 10).is_err());
    }

    #[test]
    fn raw_depth_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = DepthImage::zeros(7, 5, Intrinsics::new(525.0, 525.0, 3.5, 2.25));
        img.set(1, 1, 750.04);
        img.set(6, 4, 6553.5);
        let a = dir.path().join("a.raw");
        img.save(&a).unwrap();
        let loaded = DepthImage::load(&a).unwrap();
        assert_eq!(loaded.get(1, 1), 7500.0 * RAW_DEPTH_SCALE_MM);
        let b = dir.path().join("b.raw");
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(a.with_extension("json")).unwrap(), fs::read(b.with_extension("json")).unwrap());
    }

    #[test]
    fn crop_keeps_backprojection() {
        let mut img = DepthImage::zeros(10, 8, Intrinsics::new(500.0, 500.0, 4.5, 3.5));
        img.set(6, 5, 800.0);
        let full = backproject(&img).unwrap().cloud.points[0];
        let c = img.crop(PixelRect { u0: 3, v0: 2, width: 5, height: 5 });
        assert_eq!(c.get(3, 3), 800.0);
        let cropped = backproject(&c).unwrap().cloud.points[0];
        assert_abs_diff_eq!(full, cropped, epsilon = 1e-12);
    }

    #[test]
    fn euler_round_trip_and_wrap() {
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        let pose = Pose::new([1.0, 2.0, 3.0], [0.1, -0.4, 0.7]);
        let back = Pose::from_isometry(&pose.isometry());
        for i in 0..3 {
            assert_abs_diff_eq!(back.rotation[i], pose.rotation[i], epsilon = 1e-12);
            assert_abs_diff_eq!(back.translation[i], pose.translation[i], epsilon = 1e-12);
        }
        // yaw rotates x toward y
        let p = Pose::new([0.0; 3], [0.0, 0.0, PI / 2.0]).transform(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }
}
