//! Part extraction and Histogram-of-Control-Points features.
//!
//! A part is a local region of one scale level, either a fixed pixel window
//! or a fixed unit-cube box around an anchor point. Its shape is described by
//! the control points of the level's implicit B-spline that sit in the part's
//! lateral footprint and close to the surface along the depth direction. The
//! feature counts them in log-radius x inclination x azimuth bins around the
//! part center.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, estimate_normals, geometric_scales, normalize_scale_space, DepthImage, Point3, ScaleSpace,
    Vector3,
};
use crate::ibs::{fit_3l, ControlDescriptor, ControlLattice, FitParams};
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartMode {
    Fixed,
    Variable,
}

impl std::fmt::Display for PartMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartMode::Fixed => "fixed",
            PartMode::Variable => "variable",
        })
    }
}

impl std::str::FromStr for PartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(PartMode::Fixed),
            "variable" => Ok(PartMode::Variable),
            other => Err(Error::InvalidParameter(format!("unknown part mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub mode: PartMode,
    /// Fixed mode: window side as a fraction of the valid-pixel bounding box.
    pub g: f64,
    /// Variable mode: edge of the part box in unit-cube units.
    pub box_edge: f64,
    /// Anchor spacing in pixels; anchors sit on pixels with `u % stride == 0`
    /// and `v % stride == 0`. A stride at least as large as the box collapses
    /// to the single valid pixel nearest the box center.
    pub stride: usize,
}

impl PartSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0 && self.g <= 1.0) {
            return Err(Error::InvalidParameter(format!("part size g = {} not in (0, 1]", self.g)));
        }
        if !(self.box_edge > 0.0 && self.box_edge <= 1.0) {
            return Err(Error::InvalidParameter(format!("box edge {} not in (0, 1]", self.box_edge)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which lattice vertices of a footprint column describe the part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthExtent {
    /// Every vertex of the column.
    FullColumn,
    /// Vertices within `half_width * delta` of the column's surface depth.
    SurfaceBand { half_width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HocpParams {
    /// Radial, inclination and azimuth bin counts.
    pub nu: [usize; 3],
    pub r_min_fraction: f64,
    /// Depth-check tolerance in unit-cube units.
    pub delta_d: f64,
    /// Keep only control points with `|weight| > threshold`.
    pub weight_threshold: Option<f64>,
    pub depth_extent: DepthExtent,
    /// Refine each column's surface depth to the zero crossing of the fitted
    /// field near the measured depth.
    pub surface_from_ibs: bool,
}

impl Default for HocpParams {
    fn default() -> Self {
        Self {
            nu: [4, 8, 8],
            r_min_fraction: 1.0 / 16.0,
            delta_d: 0.05,
            weight_threshold: None,
            depth_extent: DepthExtent::SurfaceBand { half_width: 1.0 },
            surface_from_ibs: true,
        }
    }
}

impl HocpParams {
    pub fn dimension(&self) -> usize {
        self.nu.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu.iter().any(|v| *v == 0 || *v > 255) {
            return Err(Error::InvalidParameter(format!("bin counts {:?} must be in 1..=255", self.nu)));
        }
        if !(self.r_min_fraction > 0.0 && self.r_min_fraction < 1.0) {
            return Err(Error::InvalidParameter("r_min_fraction must be in (0, 1)".into()));
        }
        if !(self.delta_d > 0.0) {
            return Err(Error::InvalidParameter("delta_d must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoCPFeature {
    pub bins: Vec<u32>,
    pub nu: [usize; 3],
    pub r_min: f64,
    pub r_max: f64,
}

impl HoCPFeature {
    pub fn dimension(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| *b as u64).sum()
    }

    /// Euclidean distance between the count vectors.
    pub fn distance(&self, other: &HoCPFeature) -> f64 {
        l2(&self.bins, &other.bins)
    }

    /// Flat index of bin `(radial, inclination, azimuth)`.
    pub fn index(nu: [usize; 3], radial: usize, inclination: usize, azimuth: usize) -> usize {
        (radial * nu[1] + inclination) * nu[2] + azimuth
    }
}

pub(crate) fn l2(a: &[u32], b: &[u32]) -> f64 {
    (a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as i64 - *y as i64;
            (d * d) as u64
        })
        .sum::<u64>() as f64)
        .sqrt()
}

/// Angular bins and `ln r` of a descriptor at `rel` from the part center.
#[inline]
fn angular_bins(rel: &Vector3, nu: [usize; 3]) -> (f64, u8, u8) {
    let r = rel.norm();
    let cos_incl = if r > 0.0 { (rel.z / r).clamp(-1.0, 1.0) } else { 0.0 };
    let t_theta = nu[1] as f64 * (cos_incl + 1.0) / 2.0;
    let incl = (t_theta.floor() as usize).min(nu[1] - 1);
    let mut phi = rel.y.atan2(rel.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let t_phi = nu[2] as f64 * phi / (2.0 * PI);
    let az = (t_phi.floor() as usize).min(nu[2] - 1);
    (r.ln(), incl as u8, az as u8)
}

#[inline]
fn radial_bin(ln_r: f64, ln_r_max: f64, ln_fraction: f64, nu_r: usize) -> usize {
    let ln_r_min = ln_r_max + ln_fraction;
    if ln_r < ln_r_min {
        return 0;
    }
    let t = nu_r as f64 * (ln_r - ln_r_min) / (ln_r_max - ln_r_min);
    (t.floor() as usize).min(nu_r - 1)
}

/// Spherical histogram of control descriptors about `center`. `r_max` is the
/// distance of the farthest descriptor, `r_min = r_min_fraction * r_max`, and
/// descriptors closer than `r_min` land in the first radial bin.
pub fn hocp_histogram(
    descriptors: &[ControlDescriptor],
    center: &Point3,
    nu: [usize; 3],
    r_min_fraction: f64,
) -> Result<HoCPFeature> {
    if descriptors.is_empty() {
        return Err(Error::NoDescriptors);
    }
    let geo: Vec<(f64, u8, u8)> = descriptors
        .iter()
        .map(|d| angular_bins(&(d.position - center), nu))
        .collect();
    let ln_r_max = geo.iter().map(|g| g.0).fold(f64::NEG_INFINITY, f64::max);
    if ln_r_max == f64::NEG_INFINITY {
        return Err(Error::ZeroRadius);
    }
    let ln_fraction = r_min_fraction.ln();
    let mut bins = vec![0u32; nu.iter().product()];
    for (ln_r, incl, az) in geo {
        let rb = radial_bin(ln_r, ln_r_max, ln_fraction, nu[0]);
        bins[HoCPFeature::index(nu, rb, incl as usize, az as usize)] += 1;
    }
    let r_max = ln_r_max.exp();
    Ok(HoCPFeature {
        bins,
        nu,
        r_min: r_max * r_min_fraction,
        r_max,
    })
}

/// Part-local depth map: surface depth of each footprint column relative to
/// the part center, keyed by the column offset from the center column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthPatch {
    di0: i32,
    dj0: i32,
    width: usize,
    height: usize,
    depth: Vec<f32>,
}

impl DepthPatch {
    pub fn from_cells(cells: impl IntoIterator<Item = (i32, i32, f64)>) -> Self {
        let cells: Vec<(i32, i32, f64)> = cells.into_iter().collect();
        if cells.is_empty() {
            return Self::default();
        }
        let (mut i0, mut j0, mut i1, mut j1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for (i, j, _) in &cells {
            i0 = i0.min(*i);
            j0 = j0.min(*j);
            i1 = i1.max(*i);
            j1 = j1.max(*j);
        }
        let width = (i1 - i0 + 1) as usize;
        let height = (j1 - j0 + 1) as usize;
        let mut depth = vec![f32::NAN; width * height];
        for (i, j, d) in cells {
            depth[(j - j0) as usize * width + (i - i0) as usize] = d as f32;
        }
        Self {
            di0: i0,
            dj0: j0,
            width,
            height,
            depth,
        }
    }

    #[inline]
    pub fn get(&self, di: i32, dj: i32) -> Option<f64> {
        let (x, y) = (di - self.di0, dj - self.dj0);
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return None;
        }
        let d = self.depth[y as usize * self.width + x as usize];
        (!d.is_nan()).then_some(d as f64)
    }

    pub fn cells(&self) -> impl Iterator<Item = (i32, i32, f64)> + '_ {
        self.depth.iter().enumerate().filter(|(_, d)| !d.is_nan()).map(move |(k, d)| {
            (
                self.di0 + (k % self.width) as i32,
                self.dj0 + (k / self.width) as i32,
                *d as f64,
            )
        })
    }

    pub fn is_empty(&self) -> bool {
        self.cells().next().is_none()
    }

    pub(crate) fn raw(&self) -> (i32, i32, usize, usize, &[f32]) {
        (self.di0, self.dj0, self.width, self.height, &self.depth)
    }

    pub(crate) fn from_raw(di0: i32, dj0: i32, width: usize, height: usize, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::CorruptModel("depth patch size mismatch".into()));
        }
        Ok(Self {
            di0,
            dj0,
            width,
            height,
            depth,
        })
    }
}

/// What a split node keeps of a training part.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub feature: HoCPFeature,
    pub depth_map: DepthPatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DescGeom {
    rel: [f32; 3],
    ln_r: f64,
    incl: u8,
    az: u8,
    weight: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Column {
    di: i16,
    dj: i16,
    depth: f32,
    start: u32,
    end: u32,
    ln_r_max: f64,
}

/// Control descriptors of a part grouped by footprint column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartShape {
    columns: Vec<Column>,
    descs: Vec<DescGeom>,
}

impl PartShape {
    pub fn descriptor_count(&self) -> usize {
        self.descs.len()
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }
}

/// A control descriptor tagged with its footprint column and that column's
/// relative surface depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartDescriptor {
    pub descriptor: ControlDescriptor,
    pub column: [i32; 2],
    pub depth: f64,
}

#[derive(Clone, Debug)]
pub struct Part {
    pub center_px: (u32, u32),
    /// Unit-cube location of the anchor point.
    pub center_3d: Point3,
    /// Camera-frame location of the anchor point (mm).
    pub center_metric: Point3,
    /// Object center minus part center (mm), set when annotated.
    pub offset: [f64; 3],
    /// Rotation label of the source image.
    pub rotation: [f64; 3],
    pub scale_level: usize,
    /// Number of pixels (points) the part covers.
    pub size_px: usize,
    /// Indices of the member points in the level cloud.
    pub members: Vec<u32>,
    pub depth_map: DepthPatch,
    pub shape: PartShape,
    pub feature: Option<HoCPFeature>,
}

impl Part {
    fn new(space: &ScaleSpace, level: usize, anchor: usize, members: Vec<u32>) -> Self {
        let lvl = &space.levels[level];
        let (u, v) = lvl.pixels[anchor];
        Part {
            center_px: (u, v),
            center_3d: lvl.cloud.points[anchor],
            center_metric: space.metric[anchor],
            offset: [0.0; 3],
            rotation: [0.0; 3],
            scale_level: level,
            size_px: members.len(),
            members,
            depth_map: DepthPatch::default(),
            shape: PartShape::default(),
            feature: None,
        }
    }

    pub fn template(&self) -> Option<Template> {
        Some(Template {
            feature: self.feature.clone()?,
            depth_map: self.depth_map.clone(),
        })
    }

    /// The part's descriptors in their generic form.
    pub fn descriptors(&self) -> Vec<PartDescriptor> {
        let mut out = Vec::with_capacity(self.shape.descs.len());
        for col in &self.shape.columns {
            for d in &self.shape.descs[col.start as usize..col.end as usize] {
                let rel = Vector3::new(d.rel[0] as f64, d.rel[1] as f64, d.rel[2] as f64);
                out.push(PartDescriptor {
                    descriptor: ControlDescriptor {
                        index: [0; 3],
                        weight: d.weight as f64,
                        position: self.center_3d + rel,
                    },
                    column: [col.di as i32, col.dj as i32],
                    depth: col.depth as f64,
                });
            }
        }
        out
    }

    /// Feature over the descriptors that pass the depth check against
    /// `template`; `None` when nothing survives.
    pub fn consistent_feature(&self, template: &DepthPatch, params: &HocpParams) -> Option<HoCPFeature> {
        let keep: Vec<bool> = self
            .shape
            .columns
            .iter()
            .map(|c| column_consistent(c.di as i32, c.dj as i32, c.depth as f64, template, params.delta_d))
            .collect();
        if keep.iter().all(|k| *k) {
            if let Some(f) = &self.feature {
                return Some(f.clone());
            }
        }
        self.shape_histogram(&keep, params)
    }

    /// `||f_Omega - f_T||` for the descriptors that pass the depth check
    /// against `template`; infinite when none does.
    pub fn template_distance(&self, template: &Template, params: &HocpParams) -> f64 {
        let consistent = |c: &Column| column_consistent(c.di as i32, c.dj as i32, c.depth as f64, &template.depth_map, params.delta_d);
        if let Some(f) = &self.feature {
            if self.shape.columns.iter().all(consistent) {
                return l2(&f.bins, &template.feature.bins);
            }
        }
        SCRATCH.with(|cell| {
            let (keep, bins) = &mut *cell.borrow_mut();
            keep.clear();
            let mut ln_r_max = f64::NEG_INFINITY;
            for c in &self.shape.columns {
                let k = consistent(c);
                if k {
                    ln_r_max = ln_r_max.max(c.ln_r_max);
                }
                keep.push(k);
            }
            if ln_r_max == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            let nu = params.nu;
            let ln_fraction = params.r_min_fraction.ln();
            bins.clear();
            bins.resize(params.dimension(), 0);
            for (c, _) in self.shape.columns.iter().zip(keep.iter()).filter(|(_, k)| **k) {
                for d in &self.shape.descs[c.start as usize..c.end as usize] {
                    let rb = radial_bin(d.ln_r, ln_r_max, ln_fraction, nu[0]);
                    bins[HoCPFeature::index(nu, rb, d.incl as usize, d.az as usize)] += 1;
                }
            }
            l2(bins, &template.feature.bins)
        })
    }

    fn shape_histogram(&self, keep: &[bool], params: &HocpParams) -> Option<HoCPFeature> {
        let nu = params.nu;
        let kept = || {
            self.shape
                .columns
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(c, _)| &self.shape.descs[c.start as usize..c.end as usize])
        };
        let ln_r_max = kept().map(|d| d.ln_r).fold(f64::NEG_INFINITY, f64::max);
        if ln_r_max == f64::NEG_INFINITY {
            return None;
        }
        let ln_fraction = params.r_min_fraction.ln();
        let mut bins = vec![0u32; params.dimension()];
        for d in kept() {
            let rb = radial_bin(d.ln_r, ln_r_max, ln_fraction, nu[0]);
            bins[HoCPFeature::index(nu, rb, d.incl as usize, d.az as usize)] += 1;
        }
        let r_max = ln_r_max.exp();
        Some(HoCPFeature {
            bins,
            nu,
            r_min: r_max * params.r_min_fraction,
            r_max,
        })
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<bool>, Vec<u32>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

#[inline]
fn column_consistent(di: i32, dj: i32, depth: f64, template: &DepthPatch, delta_d: f64) -> bool {
    match template.get(di, dj) {
        Some(t) => (depth - t).abs() <= delta_d,
        None => true,
    }
}

/// Drops descriptors whose column depth deviates from the template's depth
/// at the same relative column by more than `delta_d`. Columns the template
/// does not cover are kept.
pub fn depth_consistency_filter(
    descriptors: &[PartDescriptor],
    template: &Part,
    delta_d: f64,
) -> Vec<PartDescriptor> {
    descriptors
        .iter()
        .filter(|d| column_consistent(d.column[0], d.column[1], d.depth, &template.depth_map, delta_d))
        .copied()
        .collect()
}

fn anchors(pixels: &[(u32, u32)], stride: usize) -> Vec<usize> {
    let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0, 0);
    for (u, v) in pixels {
        u0 = u0.min(*u);
        v0 = v0.min(*v);
        u1 = u1.max(*u);
        v1 = v1.max(*v);
    }
    let side = (u1 - u0).max(v1 - v0) as usize + 1;
    if stride >= side {
        let (cu, cv) = ((u0 + u1) as f64 / 2.0, (v0 + v1) as f64 / 2.0);
        let best = pixels
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.0 as f64 - cu).powi(2) + (a.1 as f64 - cv).powi(2);
                let db = (b.0 as f64 - cu).powi(2) + (b.1 as f64 - cv).powi(2);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i);
        return best.into_iter().collect();
    }
    let s = stride as u32;
    pixels
        .iter()
        .enumerate()
        .filter(|(_, (u, v))| u % s == 0 && v % s == 0)
        .map(|(i, _)| i)
        .collect()
}

/// Square pixel windows of side `g * max(bbox width, bbox height)` around
/// every anchor, clipped to the image; members are the level points whose
/// pixel is inside.
pub fn extract_parts_fixed(
    space: &ScaleSpace,
    level: usize,
    spec: &PartSpec,
    image_size: (usize, usize),
) -> Result<Vec<Part>> {
    spec.validate()?;
    let lvl = space.levels.get(level).ok_or(Error::InvalidParameter(format!("no level {level}")))?;
    if lvl.pixels.is_empty() {
        return Err(Error::EmptyCloud("scale level"));
    }
    let (w, h) = image_size;
    let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
    for (u, v) in &lvl.pixels {
        let (u, v) = (*u as usize, *v as usize);
        if u >= w || v >= h {
            return Err(Error::InvalidParameter(format!("pixel ({u}, {v}) outside {w}x{h}")));
        }
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let box_side = (u1 - u0 + 1).max(v1 - v0 + 1);
    let window = ((spec.g * box_side as f64).round() as usize).max(1);
    if window > w.max(h) {
        return Err(Error::WindowTooLarge {
            window,
            width: w,
            height: h,
        });
    }
    let mut index = vec![u32::MAX; w * h];
    for (k, (u, v)) in lvl.pixels.iter().enumerate() {
        index[*v as usize * w + *u as usize] = k as u32;
    }
    let half = (window as i64 - 1) / 2;
    let parts = anchors(&lvl.pixels, spec.stride)
        .into_iter()
        .map(|a| {
            let (cu, cv) = lvl.pixels[a];
            let (wu0, wv0) = (cu as i64 - half, cv as i64 - half);
            let mut members = Vec::new();
            for v in wv0.max(0)..(wv0 + window as i64).min(h as i64) {
                for u in wu0.max(0)..(wu0 + window as i64).min(w as i64) {
                    let k = index[v as usize * w + u as usize];
                    if k != u32::MAX {
                        members.push(k);
                    }
                }
            }
            Part::new(space, level, a, members)
        })
        .collect();
    Ok(parts)
}

/// Axis-aligned unit-cube boxes of edge `box_edge` around every anchor;
/// members are the level points inside the box.
pub fn extract_parts_variable(space: &ScaleSpace, level: usize, spec: &PartSpec) -> Result<Vec<Part>> {
    spec.validate()?;
    let lvl = space.levels.get(level).ok_or(Error::InvalidParameter(format!("no level {level}")))?;
    if lvl.cloud.is_empty() {
        return Err(Error::EmptyCloud("scale level"));
    }
    let half = spec.box_edge / 2.0;
    let pts = &lvl.cloud.points;
    let parts = anchors(&lvl.pixels, spec.stride)
        .into_iter()
        .map(|a| {
            let c = pts[a];
            let members = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    (p.x - c.x).abs() <= half && (p.y - c.y).abs() <= half && (p.z - c.z).abs() <= half
                })
                .map(|(k, _)| k as u32)
                .collect();
            Part::new(space, level, a, members)
        })
        .collect();
    Ok(parts)
}

pub fn extract_parts(
    space: &ScaleSpace,
    level: usize,
    spec: &PartSpec,
    image_size: (usize, usize),
) -> Result<Vec<Part>> {
    match spec.mode {
        PartMode::Fixed => extract_parts_fixed(space, level, spec, image_size),
        PartMode::Variable => extract_parts_variable(space, level, spec),
    }
}

/// Surface depth of every lattice column of one scale level. A point belongs
/// to the column of its laterally nearest lattice vertex.
#[derive(Clone, Debug)]
pub struct LevelSurface {
    n: usize,
    depth: Vec<f32>,
}

impl LevelSurface {
    /// Median depth of the column's points, optionally moved to the zero
    /// crossing of `lattice` within one knot interval of it.
    pub fn build(points: &[Point3], lattice: &ControlLattice, refine: bool) -> Self {
        let n = lattice.resolution();
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n * n];
        for p in points {
            let (i, j) = column_of(p, n);
            buckets[i * n + j].push(p.z);
        }
        let delta = lattice.delta();
        let depth = buckets
            .iter_mut()
            .enumerate()
            .map(|(k, zs)| {
                if zs.is_empty() {
                    return f32::NAN;
                }
                zs.sort_by(f64::total_cmp);
                let median = zs[zs.len() / 2];
                if !refine {
                    return median as f32;
                }
                let (i, j) = (k / n, k % n);
                let x = (i as f64 - 1.0) * delta;
                let y = (j as f64 - 1.0) * delta;
                zero_crossing(lattice, x, y, median, delta).unwrap_or(median) as f32
            })
            .collect();
        Self { n, depth }
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn depth(&self, i: usize, j: usize) -> Option<f64> {
        let d = self.depth[i * self.n + j];
        (!d.is_nan()).then_some(d as f64)
    }
}

/// 0-based lattice column whose vertex is laterally nearest to `p`.
#[inline]
fn column_of(p: &Point3, n: usize) -> (usize, usize) {
    let cells = (n - 3) as f64;
    let i = (p.x * cells).round() as usize + 1;
    let j = (p.y * cells).round() as usize + 1;
    (i.min(n - 2), j.min(n - 2))
}

/// Nearest `+ -> -` sign change of `f(x, y, .)` to `z0` within `z0 +- delta`.
fn zero_crossing(lattice: &ControlLattice, x: f64, y: f64, z0: f64, delta: f64) -> Option<f64> {
    let f = |z: f64| lattice.evaluate_unchecked(&Point3::new(x, y, z.clamp(0.0, 1.0)));
    let steps = 8;
    let lo = (z0 - delta).max(0.0);
    let hi = (z0 + delta).min(1.0);
    let h = (hi - lo) / steps as f64;
    if !(h > 0.0) {
        return None;
    }
    let mut best: Option<f64> = None;
    let mut za = lo;
    let mut fa = f(za);
    for s in 1..=steps {
        let zb = lo + s as f64 * h;
        let fb = f(zb);
        if fa > 0.0 && fb <= 0.0 {
            let (mut a, mut b) = (za, zb);
            for _ in 0..20 {
                let m = 0.5 * (a + b);
                if f(m) > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let root = 0.5 * (a + b);
            if best.is_none_or(|r| (r - z0).abs() > (root - z0).abs()) {
                best = Some(root);
            }
        }
        za = zb;
        fa = fb;
    }
    best
}

/// Describes a part with the control points in its footprint columns,
/// optionally depth-checked against a template, and bins them about the part
/// center.
pub fn featurize_part(
    part: &Part,
    level_points: &[Point3],
    surface: &LevelSurface,
    lattice: &ControlLattice,
    params: &HocpParams,
    template: Option<&Part>,
) -> Result<Part> {
    params.validate()?;
    let n = lattice.resolution();
    if surface.resolution() != n {
        return Err(Error::InvalidParameter("surface and lattice resolutions differ".into()));
    }
    let delta = lattice.delta();
    let (ci, cj) = column_of(&part.center_3d, n);
    let mut columns: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for m in &part.members {
        let p = level_points
            .get(*m as usize)
            .ok_or(Error::InvalidParameter(format!("member {m} outside the level cloud")))?;
        columns.insert(column_of(p, n), ());
    }

    let mut shape = PartShape::default();
    let mut depth_cells = Vec::with_capacity(columns.len());
    for (i, j) in columns.keys().copied() {
        let Some(surface_z) = surface.depth(i, j) else { continue };
        let (di, dj) = (i as i32 - ci as i32, j as i32 - cj as i32);
        let rel_depth = surface_z - part.center_3d.z;
        depth_cells.push((di, dj, rel_depth));
        let ks: Box<dyn Iterator<Item = usize>> = match params.depth_extent {
            DepthExtent::FullColumn => Box::new(0..n),
            DepthExtent::SurfaceBand { half_width } => {
                let lo = ((surface_z - half_width * delta) / delta + 1.0).ceil().max(0.0) as usize;
                let hi = ((surface_z + half_width * delta) / delta + 1.0).floor().min((n - 1) as f64);
                if hi < 0.0 {
                    Box::new(0..0)
                } else {
                    Box::new(lo..=hi as usize)
                }
            }
        };
        let start = shape.descs.len() as u32;
        for k in ks {
            let weight = lattice.get(i, j, k);
            if params.weight_threshold.is_some_and(|t| weight.abs() <= t) {
                continue;
            }
            let rel = lattice.vertex_position(i, j, k) - part.center_3d;
            let (ln_r, incl, az) = angular_bins(&rel, params.nu);
            shape.descs.push(DescGeom {
                rel: [rel.x as f32, rel.y as f32, rel.z as f32],
                ln_r,
                incl,
                az,
                weight: weight as f32,
            });
        }
        let end = shape.descs.len() as u32;
        if end > start {
            shape.columns.push(Column {
                di: di as i16,
                dj: dj as i16,
                depth: rel_depth as f32,
                start,
                end,
                ln_r_max: shape.descs[start as usize..].iter().map(|d| d.ln_r).fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    if shape.descs.is_empty() {
        return Err(Error::NoDescriptors);
    }

    let mut out = Part {
        members: part.members.clone(),
        depth_map: DepthPatch::from_cells(depth_cells),
        shape,
        feature: None,
        ..part.clone()
    };
    let keep: Vec<bool> = match template {
        Some(t) => out
            .shape
            .columns
            .iter()
            .map(|c| column_consistent(c.di as i32, c.dj as i32, c.depth as f64, &t.depth_map, params.delta_d))
            .collect(),
        None => vec![true; out.shape.columns.len()],
    };
    let feature = out.shape_histogram(&keep, params).ok_or(Error::NoDescriptors)?;
    if feature.r_max == 0.0 {
        return Err(Error::ZeroRadius);
    }
    out.feature = Some(feature);
    Ok(out)
}

/// Everything that turns a depth image into featurized parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Scale constants of the training scale space.
    pub scales: Vec<f64>,
    pub normal_neighbors: usize,
    pub fit: FitParams,
    pub hocp: HocpParams,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            scales: geometric_scales(1.15, 9),
            normal_neighbors: 8,
            fit: FitParams {
                max_points: Some(1000),
                tolerance: 1e-4,
                ..FitParams::default()
            },
            hocp: HocpParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LevelParts {
    pub level: usize,
    pub scale: f64,
    pub h: f64,
    pub parts: Vec<Part>,
    pub surface_rms: f64,
}

#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub space: ScaleSpace,
    pub levels: Vec<LevelParts>,
}

impl ImageFeatures {
    pub fn parts(&self) -> impl Iterator<Item = &Part> {
        self.levels.iter().flat_map(|l| l.parts.iter())
    }

    pub fn into_parts(self) -> Vec<Part> {
        self.levels.into_iter().flat_map(|l| l.parts).collect()
    }
}

/// Back-projects `image`, normalizes it at every scale in `scales`, fits one
/// implicit B-spline per level and featurizes the parts of every level.
/// Parts that end up without descriptors are dropped.
pub fn image_features(
    image: &DepthImage,
    scales: &[f64],
    spec: &PartSpec,
    config: &FeatureConfig,
    exec: Exec,
) -> Result<ImageFeatures> {
    spec.validate()?;
    config.hocp.validate()?;
    let bp = backproject(image)?;
    if bp.cloud.len() <= config.normal_neighbors {
        return Err(Error::EmptyCloud("too few points for normal estimation"));
    }
    let normals = estimate_normals(&bp.cloud, config.normal_neighbors)?;
    let space = normalize_scale_space(&bp.cloud, &bp.pixels, scales)?;
    let size = (image.width(), image.height());
    let levels = exec.map_range(space.levels.len(), |level| -> Result<LevelParts> {
        let lvl = &space.levels[level];
        let fit = fit_3l(&lvl.cloud.points, &normals.normals, &config.fit)?;
        let surface = LevelSurface::build(&lvl.cloud.points, &fit.lattice, config.hocp.surface_from_ibs);
        let mut parts = Vec::new();
        for part in extract_parts(&space, level, spec, size)? {
            match featurize_part(&part, &lvl.cloud.points, &surface, &fit.lattice, &config.hocp, None) {
                Ok(p) => parts.push(p),
                Err(Error::NoDescriptors | Error::ZeroRadius) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(LevelParts {
            level,
            scale: lvl.scale,
            h: lvl.h,
            parts,
            surface_rms: fit.surface_rms,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ImageFeatures { space, levels })
}

/// One CSV row per featurized part: `part_id, scale_level, c_x, c_y, bins...`.
pub fn write_feature_csv<W: Write>(parts: &[Part], mut out: W) -> Result<()> {
    let dim = parts.iter().find_map(|p| p.feature.as_ref()).map_or(0, |f| f.dimension());
    write!(out, "part_id,scale_level,c_x,c_y")?;
    for b in 0..dim {
        write!(out, ",b{b}")?;
    }
    writeln!(out)?;
    for (id, p) in parts.iter().enumerate() {
        let Some(f) = &p.feature else { continue };
        write!(out, "{id},{},{},{}", p.scale_level, p.center_px.0, p.center_px.1)?;
        for b in &f.bins {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
