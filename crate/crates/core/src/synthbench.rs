//! Synthetic benchmark data: stand-in object meshes, a z-buffer depth
//! renderer, occluder and clutter injection, and train/test set assembly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, Intrinsics, PixelRect, Point3, Pose, Vector3};
use crate::par::Exec;

/// Triangle mesh in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum MeshSpec {
    Box {
        size: [f64; 3],
    },
    /// Box body with a cylindrical lens on the face towards the camera.
    Camera {
        body: [f64; 3],
        lens_radius: f64,
        lens_length: f64,
    },
    /// Open-top cup with wall thickness and a tube handle.
    Cup {
        radius: f64,
        height: f64,
        wall: f64,
        handle_reach: f64,
    },
    Bottle {
        radius: f64,
        height: f64,
        neck_radius: f64,
        neck_height: f64,
    },
}

impl MeshSpec {
    pub fn default_camera() -> Self {
        MeshSpec::Camera {
            body: [110.0, 70.0, 50.0],
            lens_radius: 25.0,
            lens_length: 35.0,
        }
    }

    pub fn default_cup() -> Self {
        MeshSpec::Cup {
            radius: 40.0,
            height: 95.0,
            wall: 5.0,
            handle_reach: 25.0,
        }
    }

    pub fn default_bottle() -> Self {
        MeshSpec::Bottle {
            radius: 30.0,
            height: 150.0,
            neck_radius: 12.0,
            neck_height: 30.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            MeshSpec::Box { size } => MeshSpec::Box { size: size.map(|s| s * k) },
            MeshSpec::Camera {
                body,
                lens_radius,
                lens_length,
            } => MeshSpec::Camera {
                body: body.map(|s| s * k),
                lens_radius: lens_radius * k,
                lens_length: lens_length * k,
            },
            MeshSpec::Cup {
                radius,
                height,
                wall,
                handle_reach,
            } => MeshSpec::Cup {
                radius: radius * k,
                height: height * k,
                wall: wall * k,
                handle_reach: handle_reach * k,
            },
            MeshSpec::Bottle {
                radius,
                height,
                neck_radius,
                neck_height,
            } => MeshSpec::Bottle {
                radius: radius * k,
                height: height * k,
                neck_radius: neck_radius * k,
                neck_height: neck_height * k,
            },
        }
    }
}

const SEGMENTS: usize = 32;

fn positive(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("mesh dimensions must be positive, got {values:?}")))
    }
}

/// Builds the mesh of `spec`, translated so that its area-weighted surface
/// centroid is the origin.
pub fn make_mesh(spec: &MeshSpec) -> Result<Mesh> {
    let mut mesh = match *spec {
        MeshSpec::Box { size } => {
            positive(&size)?;
            box_mesh(size)
        }
        MeshSpec::Camera {
            body,
            lens_radius,
            lens_length,
        } => {
            positive(&body)?;
            positive(&[lens_radius, lens_length])?;
            if 2.0 * lens_radius > body[0].min(body[1]) {
                return Err(Error::InvalidParameter("lens wider than the body".into()));
            }
            let mut m = box_mesh(body);
            let front = -body[2] / 2.0;
            let lens = lathe(&[(0.0, 0.0), (lens_radius, 0.0), (lens_radius, lens_length), (0.0, lens_length)], &[], |r, t, h| {
                Point3::new(r * t.cos(), r * t.sin(), front - h)
            });
            m.append(lens.0);
            m
        }
        MeshSpec::Cup {
            radius,
            height,
            wall,
            handle_reach,
        } => {
            positive(&[radius, height, wall, handle_reach])?;
            if wall >= radius || wall >= height {
                return Err(Error::InvalidParameter("cup wall thicker than the cup".into()));
            }
            cup_mesh(radius, height, wall, handle_reach)
        }
        MeshSpec::Bottle {
            radius,
            height,
            neck_radius,
            neck_height,
        } => {
            positive(&[radius, height, neck_radius, neck_height])?;
            if neck_radius >= radius || neck_height >= height {
                return Err(Error::InvalidParameter("bottle neck larger than the body".into()));
            }
            let shoulder = height - neck_height;
            let profile = [
                (0.0, 0.0),
                (radius, 0.0),
                (radius, shoulder * 0.8),
                (neck_radius, shoulder),
                (neck_radius, height),
                (0.0, height),
            ];
            lathe(&profile, &[], |r, t, h| Point3::new(r * t.cos(), -h, r * t.sin())).0
        }
    };
    let c = mesh.surface_centroid();
    for v in &mut mesh.vertices {
        *v -= c.coords;
    }
    Ok(mesh)
}

fn box_mesh(size: [f64; 3]) -> Mesh {
    let [a, b, c] = size.map(|s| s / 2.0);
    let vertices = (0..8)
        .map(|i| {
            Point3::new(
                if i & 1 == 0 { -a } else { a },
                if i & 2 == 0 { -b } else { b },
                if i & 4 == 0 { -c } else { c },
            )
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    Mesh { vertices, triangles }
}

/// Surface of revolution of a profile `(r, h)` whose first and last points
/// lie on the axis. `holes` lists `(ring, segment)` quads to leave open.
/// Returns the mesh and the vertex index of `(ring, segment)`.
fn lathe(
    profile: &[(f64, f64)],
    holes: &[(usize, usize)],
    place: impl Fn(f64, f64, f64) -> Point3,
) -> (Mesh, impl Fn(usize, usize) -> u32) {
    let m = profile.len() - 1;
    let seg = SEGMENTS;
    let mut vertices = vec![place(0.0, 0.0, profile[0].1)];
    for &(r, h) in &profile[1..m] {
        for s in 0..seg {
            let t = 2.0 * PI * (s as f64 - 0.5) / seg as f64;
            vertices.push(place(r, t, h));
        }
    }
    vertices.push(place(0.0, 0.0, profile[m].1));
    let last = (vertices.len() - 1) as u32;
    let index = move |ring: usize, s: usize| -> u32 {
        if ring == 0 {
            0
        } else if ring == m {
            last
        } else {
            (1 + (ring - 1) * seg + s % seg) as u32
        }
    };
    let mut triangles = Vec::new();
    for ring in 0..m {
        for s in 0..seg {
            if holes.contains(&(ring, s)) {
                continue;
            }
            let (a, b) = (index(ring, s), index(ring, s + 1));
            let (c, d) = (index(ring + 1, s + 1), index(ring + 1, s));
            if ring == 0 {
                triangles.push([a, c, d]);
            } else if ring + 1 == m {
                triangles.push([a, b, c]);
            } else {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
    }
    (Mesh { vertices, triangles }, index)
}

/// Cup body of revolution about the object's y axis (opening towards -y)
/// with a tube handle on +x whose ends are stitched into two wall openings,
/// giving a single genus-1 surface.
fn cup_mesh(radius: f64, height: f64, wall: f64, reach: f64) -> Mesh {
    let rows = 8;
    let mut profile = vec![(0.0, 0.0)];
    for k in 0..=rows {
        profile.push((radius, height * k as f64 / rows as f64));
    }
    profile.push((radius - wall, height));
    profile.push((radius - wall, wall));
    profile.push((0.0, wall));
    // Outer-wall quads between rings (1 + k) and (2 + k); segment 0 faces +x.
    let (ra, rb) = (3, 7);
    let (mut mesh, index) = lathe(&profile, &[(ra, 0), (rb, 0)], |r, t, h| Point3::new(r * t.cos(), -h, r * t.sin()));

    let hole = |ring: usize| [index(ring, 0), index(ring, 1), index(ring + 1, 1), index(ring + 1, 0)];
    let a = hole(ra);
    let b = hole(rb);
    let centre = |q: &[u32; 4]| q.iter().map(|i| mesh.vertices[*i as usize].coords).sum::<Vector3>() / 4.0;
    let (ca, cb) = (centre(&a), centre(&b));
    let mid = (ca + cb) / 2.0;
    let half = (cb.y - ca.y).abs() / 2.0;
    let offsets: Vec<Vector3> = a.iter().map(|i| mesh.vertices[*i as usize].coords - ca).collect();
    // `a` runs (low, -t), (low, +t), (high, +t), (high, -t); the matching
    // corners of `b` have the height offset mirrored.
    let b_ring = [b[3], b[2], b[1], b[0]];
    let steps = 10;
    let mut rings: Vec<[u32; 4]> = vec![a];
    for j in 1..steps {
        let phi = PI * j as f64 / steps as f64;
        // In the (x, up = -y) plane the path runs from `ca` out to `reach`
        // and back to `cb`; `m` is the in-plane normal of the path.
        let centre = Vector3::new(mid.x + reach * phi.sin(), mid.y + half * phi.cos(), mid.z);
        let m = Vector3::new(-half * phi.sin(), -reach * phi.cos(), 0.0).normalize();
        let mut ring = [0u32; 4];
        for (k, o) in offsets.iter().enumerate() {
            let up = -o.y;
            let p = centre + Vector3::new(0.0, 0.0, o.z) + m * up;
            ring[k] = mesh.vertices.len() as u32;
            mesh.vertices.push(Point3::from(p));
        }
        rings.push(ring);
    }
    rings.push(b_ring);
    for w in rings.windows(2) {
        for k in 0..4 {
            let (p, q) = (w[0][k], w[0][(k + 1) % 4]);
            let (r, s) = (w[1][(k + 1) % 4], w[1][k]);
            mesh.triangles.push([p, q, r]);
            mesh.triangles.push([p, r, s]);
        }
    }
    mesh
}

impl Mesh {
    pub fn append(&mut self, other: Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend(other.vertices);
        self.triangles.extend(other.triangles.into_iter().map(|t| t.map(|i| i + base)));
    }

    fn triangle(&self, t: &[u32; 3]) -> [Point3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                (b - a).cross(&(c - a)).norm() / 2.0
            })
            .sum()
    }

    pub fn surface_centroid(&self) -> Point3 {
        let mut acc = Vector3::zeros();
        let mut area = 0.0;
        for t in &self.triangles {
            let [a, b, c] = self.triangle(t);
            let w = (b - a).cross(&(c - a)).norm() / 2.0;
            acc += (a.coords + b.coords + c.coords) / 3.0 * w;
            area += w;
        }
        Point3::from(acc / area)
    }

    /// Largest vertex-to-vertex distance, which is the diameter of the mesh.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }

    pub fn edge_use(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_use().values().all(|c| *c == 2)
    }

    /// `V - E + F` over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for i in t {
                used[*i as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_use().len() as i64 + self.triangles.len() as i64
    }

    pub fn transformed(&self, pose: &Pose) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| pose.transform(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// `count` points drawn area-weighted from the surface with a fixed seed.
    pub fn surface_samples(&self, count: usize, seed: u64) -> Vec<Point3> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            let [a, b, c] = self.triangle(t);
            total += (b - a).cross(&(c - a)).norm() / 2.0;
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = rng.gen_range(0.0..total);
                let k = cumulative.partition_point(|c| *c <= x).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangle(&self.triangles[k]);
                let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }

    /// ASCII triangle list: a `ihf-mesh 1` line, `vertices <n>` followed by
    /// `x y z` rows, then `triangles <m>` followed by `i j k` rows (0-based).
    pub fn to_ascii(&self) -> String {
        let mut s = String::from("ihf-mesh 1\n");
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_ascii(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("mesh: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some("ihf-mesh 1") {
            return Err(bad("missing header"));
        }
        fn count<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<usize> {
            let bad = |what: &str| Error::Format(format!("mesh: {what}"));
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let n = line.strip_prefix(key).ok_or_else(|| bad(&format!("expected {key}")))?;
            n.trim().parse().map_err(|_| bad("bad count"))
        }
        let nv = count(&mut lines, "vertices")?;
        let mut vertices = Vec::with_capacity(nv.min(1 << 20));
        for _ in 0..nv {
            let l = lines.next().ok_or_else(|| bad("truncated vertices"))?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad("bad coordinate")))
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(bad("vertex needs 3 coordinates"));
            }
            vertices.push(Point3::new(v[0], v[1], v[2]));
        }
        let nt = count(&mut lines, "triangles")?;
        let mut triangles = Vec::with_capacity(nt.min(1 << 20));
        for _ in 0..nt {
            let l = lines.next().ok_or_else(|| bad("truncated triangles"))?;
            let t: Vec<u32> = l
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad("bad index")))
                .collect::<Result<_>>()?;
            if t.len() != 3 || t.iter().any(|i| *i as usize >= nv) {
                return Err(bad("bad triangle"));
            }
            triangles.push([t[0], t[1], t[2]]);
        }
        Ok(Mesh { vertices, triangles })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ascii())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ascii(&std::fs::read_to_string(path)?)
    }
}

/// Depth buffer plus the id of the surface seen at each pixel.
#[derive(Clone, Debug)]
pub struct Raster {
    pub depth: Vec<f64>,
    pub label: Vec<u16>,
    pub width: usize,
    pub height: usize,
}

pub const NO_SURFACE: u16 = u16::MAX;

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            depth: vec![f64::INFINITY; width * height],
            label: vec![NO_SURFACE; width * height],
            width,
            height,
        }
    }

    /// Z-buffers the camera-frame triangles of `mesh`. Each covered pixel
    /// center gets the exact depth of the triangle's plane along its ray.
    pub fn draw(&mut self, mesh: &Mesh, intr: &Intrinsics, label: u16) {
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            if a.z <= 1.0 || b.z <= 1.0 || c.z <= 1.0 {
                continue;
            }
            let n = (b - a).cross(&(c - a));
            let offset = n.dot(&a.coords);
            let pa = intr.project(&a);
            let pb = intr.project(&b);
            let pc = intr.project(&c);
            let area = (pb.0 - pa.0) * (pc.1 - pa.1) - (pb.1 - pa.1) * (pc.0 - pa.0);
            if area.abs() < 1e-12 {
                continue;
            }
            let umin = pa.0.min(pb.0).min(pc.0).ceil().max(0.0);
            let umax = pa.0.max(pb.0).max(pc.0).floor().min(self.width as f64 - 1.0);
            let vmin = pa.1.min(pb.1).min(pc.1).ceil().max(0.0);
            let vmax = pa.1.max(pb.1).max(pc.1).floor().min(self.height as f64 - 1.0);
            if umin > umax || vmin > vmax {
                continue;
            }
            for v in vmin as usize..=vmax as usize {
                for u in umin as usize..=umax as usize {
                    let (x, y) = (u as f64, v as f64);
                    let w0 = ((pb.0 - x) * (pc.1 - y) - (pb.1 - y) * (pc.0 - x)) / area;
                    let w1 = ((pc.0 - x) * (pa.1 - y) - (pc.1 - y) * (pa.0 - x)) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < -1e-12 || w1 < -1e-12 || w2 < -1e-12 {
                        continue;
                    }
                    let ray = Vector3::new((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
                    let denom = n.dot(&ray);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let z = offset / denom;
                    let k = v * self.width + u;
                    if z > 0.0 && z < self.depth[k] {
                        self.depth[k] = z;
                        self.label[k] = label;
                    }
                }
            }
        }
    }

    pub fn to_image(&self, intr: Intrinsics) -> DepthImage {
        let depth = self.depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
        DepthImage::from_vec(self.width, self.height, depth, intr).expect("raster depths are valid")
    }
}

/// Depth render of `mesh` (object frame) at `pose`; zero off the object.
pub fn render_mesh(mesh: &Mesh, pose: &Pose, intr: &Intrinsics, dims: (usize, usize)) -> Result<DepthImage> {
    if !pose.is_finite() {
        return Err(Error::InvalidParameter("pose is not finite".into()));
    }
    let mut r = Raster::new(dims.0, dims.1);
    r.draw(&mesh.transformed(pose), intr, 0);
    let img = r.to_image(*intr);
    if img.valid_count() == 0 {
        return Err(Error::OutsideFrustum);
    }
    Ok(img)
}

/// An axis-aligned camera-frame box in front of the object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Occluder {
    fn mesh(&self) -> Mesh {
        let mut m = box_mesh(self.size);
        for v in &mut m.vertices {
            *v += Vector3::from(self.center);
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterItem {
    pub mesh: MeshSpec,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    /// Gaussian depth noise (mm).
    pub sigma: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub mesh: MeshSpec,
    pub pose: Pose,
    /// Requested share of object pixels hidden by the occluders.
    pub coverage_target: f64,
    pub occluders: Vec<Occluder>,
    pub clutter: Vec<ClutterItem>,
    pub noise: Noise,
    pub noise_seed: u64,
}

impl SceneSpec {
    pub fn clean(mesh: MeshSpec, pose: Pose) -> Self {
        SceneSpec {
            mesh,
            pose,
            coverage_target: 0.0,
            occluders: Vec::new(),
            clutter: Vec::new(),
            noise: Noise::default(),
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub depth: DepthImage,
    /// The object alone, as `render_mesh` draws it.
    pub clean_object: DepthImage,
    /// Pixels where the object is the visible surface.
    pub object_mask: Vec<bool>,
    /// Pixels where an occluder hides the object.
    pub occluder_mask: Vec<bool>,
    /// Visible object pixels over object pixels without occluders.
    pub visibility: f64,
    /// Tight box of the visible object pixels.
    pub bbox: Option<PixelRect>,
    pub fully_occluded: bool,
}

const OBJECT: u16 = 0;
const OCCLUDER: u16 = 1;
const CLUTTER: u16 = 2;

pub fn render_scene(spec: &SceneSpec, intr: &Intrinsics, dims: (usize, usize)) -> Result<RenderedScene> {
    let mesh = make_mesh(&spec.mesh)?;
    let clean_object = render_mesh(&mesh, &spec.pose, intr, dims)?;
    let mut r = Raster::new(dims.0, dims.1);
    r.draw(&mesh.transformed(&spec.pose), intr, OBJECT);
    for item in &spec.clutter {
        r.draw(&make_mesh(&item.mesh)?.transformed(&item.pose), intr, CLUTTER);
    }
    for o in &spec.occluders {
        r.draw(&o.mesh(), intr, OCCLUDER);
    }
    let object_mask: Vec<bool> = r.label.iter().map(|l| *l == OBJECT).collect();
    let occluder_mask: Vec<bool> = r
        .label
        .iter()
        .zip(clean_object.depths())
        .map(|(l, d)| *l == OCCLUDER && *d > 0.0)
        .collect();
    let total = clean_object.valid_count();
    let visible = object_mask.iter().filter(|m| **m).count();
    let mut depth = r.to_image(*intr);
    if spec.noise.sigma > 0.0 || spec.noise.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let normal = Normal::new(0.0, spec.noise.sigma.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in 0..dims.1 {
            for u in 0..dims.0 {
                let d = depth.get(u, v);
                if d > 0.0 {
                    let dropped = rng.gen::<f64>() < spec.noise.dropout;
                    let noisy = d + normal.sample(&mut rng);
                    depth.set(u, v, if dropped { 0.0 } else { noisy });
                }
            }
        }
    }
    let bbox = mask_bbox(&object_mask, dims.0);
    Ok(RenderedScene {
        depth,
        clean_object,
        object_mask,
        occluder_mask,
        visibility: visible as f64 / total as f64,
        bbox,
        fully_occluded: visible == 0,
    })
}

pub fn mask_bbox(mask: &[bool], width: usize) -> Option<PixelRect> {
    let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
    for (k, m) in mask.iter().enumerate() {
        if *m {
            let (u, v) = (k % width, k / width);
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
    }
    (u0 != usize::MAX).then(|| PixelRect {
        u0,
        v0,
        width: u1 - u0 + 1,
        height: v1 - v0 + 1,
    })
}

/// A frontal plate that hides about `target` of the object's pixels. The
/// plate enters from `side` (0 left, 1 right, 2 top, 3 bottom) and its extent
/// is chosen by bisection over whole pixel columns or rows.
pub fn place_occluder(
    object: &DepthImage,
    target: f64,
    side: usize,
    gap: f64,
) -> Option<Occluder> {
    if target <= 0.0 {
        return None;
    }
    let (w, h) = (object.width(), object.height());
    let bbox = object.valid_bbox()?;
    let intr = object.intrinsics();
    let near = object.depths().iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    let z = near - gap;
    let total = object.valid_count() as f64;
    let horizontal = side < 2;
    let span = if horizontal { bbox.width } else { bbox.height };
    let covered = |k: usize| -> f64 {
        let mut n = 0;
        for v in 0..h {
            for u in 0..w {
                if object.get(u, v) <= 0.0 {
                    continue;
                }
                let inside = match side {
                    0 => u < bbox.u0 + k,
                    1 => u + k >= bbox.u0 + bbox.width,
                    2 => v < bbox.v0 + k,
                    _ => v + k >= bbox.v0 + bbox.height,
                };
                n += inside as usize;
            }
        }
        n as f64 / total
    };
    // Smallest k whose coverage reaches the target, then the closer of k - 1 and k.
    let (mut lo, mut hi) = (0, span);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if covered(mid) < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let k = if lo > 0 && (covered(lo - 1) - target).abs() <= (covered(lo) - target).abs() { lo - 1 } else { lo };
    if k == 0 {
        return None;
    }
    // Pixel range [a, b) on the sweep axis; the plate spans the box on the other.
    let (a, b) = match side {
        0 => (bbox.u0, bbox.u0 + k),
        1 => (bbox.u0 + bbox.width - k, bbox.u0 + bbox.width),
        2 => (bbox.v0, bbox.v0 + k),
        _ => (bbox.v0 + bbox.height - k, bbox.v0 + bbox.height),
    };
    let margin = 20.0;
    let (u_lo, u_hi, v_lo, v_hi) = if horizontal {
        (a as f64 - 0.5, b as f64 - 0.5, bbox.v0 as f64 - margin, (bbox.v0 + bbox.height) as f64 + margin)
    } else {
        (bbox.u0 as f64 - margin, (bbox.u0 + bbox.width) as f64 + margin, a as f64 - 0.5, b as f64 - 0.5)
    };
    let thickness = 10.0;
    let front = z - thickness / 2.0;
    let x0 = (u_lo - intr.cx) * front / intr.fx;
    let x1 = (u_hi - intr.cx) * front / intr.fx;
    let y0 = (v_lo - intr.cy) * front / intr.fy;
    let y1 = (v_hi - intr.cy) * front / intr.fy;
    Some(Occluder {
        center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0, z],
        size: [x1 - x0, y1 - y0, thickness],
    })
}

/// Yaw x pitch training grid in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseGrid {
    pub yaw_limit_deg: f64,
    pub pitch_limit_deg: f64,
    pub step_deg: f64,
}

impl Default for PoseGrid {
    fn default() -> Self {
        PoseGrid {
            yaw_limit_deg: 45.0,
            pitch_limit_deg: 45.0,
            step_deg: 15.0,
        }
    }
}

impl PoseGrid {
    pub fn rotations(&self) -> Vec<[f64; 3]> {
        let steps = |limit: f64| -> Vec<f64> {
            let n = (2.0 * limit / self.step_deg).round() as i64;
            (0..=n).map(|i| (-limit + i as f64 * self.step_deg).to_radians()).collect()
        };
        let mut out = Vec::new();
        for yaw in steps(self.yaw_limit_deg) {
            for pitch in steps(self.pitch_limit_deg) {
                out.push([0.0, pitch, yaw]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub mesh: MeshSpec,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    /// Nominal training depth (mm).
    pub f_d: f64,
    pub grid: PoseGrid,
    /// Test depths are drawn from `f_d +- depth_spread`.
    pub depth_spread: f64,
    /// Lateral object offset range at test time (mm).
    pub lateral_spread: f64,
    pub occlusion_range: [f64; 2],
    pub clutter_probability: f64,
    pub noise: Noise,
    /// Relative growth of the tight box for the coarse test crop.
    pub crop_margin: f64,
    /// Relative jitter of each crop side.
    pub crop_jitter: f64,
    pub test_count: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mesh: MeshSpec::default_camera(),
            intrinsics: Intrinsics::new(525.0, 525.0, 319.5, 239.5),
            width: 640,
            height: 480,
            f_d: 750.0,
            grid: PoseGrid::default(),
            depth_spread: 50.0,
            lateral_spread: 60.0,
            occlusion_range: [0.0, 0.5],
            clutter_probability: 0.5,
            noise: Noise::default(),
            crop_margin: 0.15,
            crop_jitter: 0.1,
            test_count: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One benchmark image: the cropped depth input plus its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: DepthImage,
    pub pose: Pose,
    /// Crop rectangle in full-image pixels.
    pub crop: PixelRect,
    /// Tight box of visible object pixels in full-image pixels.
    pub bbox: PixelRect,
    pub scene: SceneSpec,
    pub visibility: f64,
    /// Crop-frame mask of pixels where an occluder hides the object.
    pub occluder_mask: Vec<bool>,
}

fn grow_rect(r: PixelRect, left: f64, right: f64, top: f64, bottom: f64, dims: (usize, usize)) -> PixelRect {
    let u0 = (r.u0 as f64 - left * r.width as f64).floor().max(0.0) as usize;
    let v0 = (r.v0 as f64 - top * r.height as f64).floor().max(0.0) as usize;
    let u1 = ((r.u0 + r.width) as f64 + right * r.width as f64).ceil().min(dims.0 as f64) as usize;
    let v1 = ((r.v0 + r.height) as f64 + bottom * r.height as f64).ceil().min(dims.1 as f64) as usize;
    PixelRect {
        u0,
        v0,
        width: u1 - u0,
        height: v1 - v0,
    }
}

fn crop_mask(mask: &[bool], width: usize, rect: PixelRect) -> Vec<bool> {
    let mut out = Vec::with_capacity(rect.area());
    for v in rect.v0..rect.v0 + rect.height {
        out.extend_from_slice(&mask[v * width + rect.u0..v * width + rect.u0 + rect.width]);
    }
    out
}

/// Clean renders at `(0, 0, f_d)` over the rotation grid, cropped to the
/// tight object box.
pub fn generate_training_set(cfg: &BenchConfig, exec: Exec) -> Result<Vec<Sample>> {
    let rotations = cfg.grid.rotations();
    if rotations.is_empty() {
        return Err(Error::InvalidParameter("empty pose grid".into()));
    }
    let dims = (cfg.width, cfg.height);
    exec.map_range(rotations.len(), |i| {
        let pose = Pose::new([0.0, 0.0, cfg.f_d], rotations[i]);
        let scene = SceneSpec::clean(cfg.mesh, pose);
        let r = render_scene(&scene, &cfg.intrinsics, dims)?;
        let bbox = r.bbox.ok_or(Error::OutsideFrustum)?;
        Ok(Sample {
            id: format!("train_{i:03}"),
            image: r.depth.crop(bbox),
            pose,
            crop: bbox,
            bbox,
            scene,
            visibility: r.visibility,
            occluder_mask: crop_mask(&r.occluder_mask, dims.0, bbox),
        })
    })
    .into_iter()
    .collect()
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn clutter_items(rng: &mut ChaCha8Rng, pose: &Pose, radius: f64) -> Vec<ClutterItem> {
    let count = rng.gen_range(1..=3);
    let z = pose.translation[2];
    (0..count)
        .map(|_| {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let size = [rng.gen_range(40.0..90.0), rng.gen_range(40.0..120.0), rng.gen_range(30.0..70.0)];
            let behind = rng.gen_bool(0.7);
            let dz = if behind { rng.gen_range(radius + 80.0..radius + 200.0) } else { -rng.gen_range(radius + 60.0..radius + 120.0) };
            let x = pose.translation[0] + side * rng.gen_range(0.6 * radius..1.4 * radius);
            let y = pose.translation[1] + rng.gen_range(-radius..radius);
            ClutterItem {
                mesh: MeshSpec::Box { size },
                pose: Pose::new([x, y, z + dz], [0.0, 0.0, rng.gen_range(-0.5..0.5)]),
            }
        })
        .collect()
}

/// Randomized occluded and cluttered scenes, each cropped to a jittered
/// coarse box around the visible object. Scene `i` draws from the random
/// stream `(seed, i)`.
pub fn generate_test_set(cfg: &BenchConfig, seed: u64, exec: Exec) -> Result<Vec<Sample>> {
    if cfg.test_count == 0 {
        return Err(Error::InvalidParameter("test count must be >= 1".into()));
    }
    let mesh = make_mesh(&cfg.mesh)?;
    let radius = mesh.vertices.iter().map(|v| v.coords.norm()).fold(0.0, f64::max);
    let dims = (cfg.width, cfg.height);
    exec.map_range(cfg.test_count, |i| {
        let mut rng = scene_rng(seed, i);
        let g = &cfg.grid;
        let rotation = [
            0.0,
            rng.gen_range(-g.pitch_limit_deg..=g.pitch_limit_deg).to_radians(),
            rng.gen_range(-g.yaw_limit_deg..=g.yaw_limit_deg).to_radians(),
        ];
        let l = cfg.lateral_spread;
        let translation = [
            rng.gen_range(-l..=l),
            rng.gen_range(-l..=l),
            cfg.f_d + rng.gen_range(-cfg.depth_spread..=cfg.depth_spread),
        ];
        let pose = Pose::new(translation, rotation);
        let mut scene = SceneSpec::clean(cfg.mesh, pose);
        scene.noise = cfg.noise;
        scene.noise_seed = rng.gen();
        let [lo, hi] = cfg.occlusion_range;
        let target = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let side = rng.gen_range(0..4);
        let gap = rng.gen_range(40.0..100.0);
        let clutter = rng.gen_bool(cfg.clutter_probability.clamp(0.0, 1.0));
        let jitter: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-cfg.crop_jitter..=cfg.crop_jitter));
        scene.coverage_target = target;
        let object = render_mesh(&mesh, &pose, &cfg.intrinsics, dims)?;
        scene.occluders = place_occluder(&object, target, side, gap).into_iter().collect();
        if clutter {
            scene.clutter = clutter_items(&mut rng, &pose, radius);
        }
        let r = render_scene(&scene, &cfg.intrinsics, dims)?;
        if r.fully_occluded {
            log::warn!("test scene {i} is fully occluded");
        }
        let bbox = r.bbox.or(object.valid_bbox()).ok_or(Error::OutsideFrustum)?;
        let m = cfg.crop_margin / 2.0;
        let crop = grow_rect(bbox, m + jitter[0], m + jitter[1], m + jitter[2], m + jitter[3], dims);
        Ok(Sample {
            id: format!("test_{i:03}"),
            image: r.depth.crop(crop),
            pose,
            crop,
            bbox,
            scene,
            visibility: r.visibility,
            occluder_mask: crop_mask(&r.occluder_mask, dims.0, crop),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Depth file relative to the manifest.
    pub depth: String,
    pub pose: Pose,
    pub crop: PixelRect,
    pub bbox: PixelRect,
    pub visibility: f64,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub f_d: f64,
    pub mesh: MeshSpec,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Writes every sample's depth file into `dir` and returns the manifest.
    pub fn write(split: Split, cfg: &BenchConfig, samples: &[Sample], dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(samples.len());
        for s in samples {
            let file = format!("{}.raw", s.id);
            s.image.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                depth: file,
                pose: s.pose,
                crop: s.crop,
                bbox: s.bbox,
                visibility: s.visibility,
                scene: s.scene.clone(),
            });
        }
        let manifest = DatasetManifest {
            split,
            f_d: cfg.f_d,
            mesh: cfg.mesh,
            entries,
        };
        let name = match split {
            Split::Train => "train.json",
            Split::Test => "test.json",
        };
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn load_image(&self, manifest_path: &Path, entry: &ManifestEntry) -> Result<DepthImage> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        DepthImage::load(&dir.join(&entry.depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(525.0, 525.0, 319.5, 239.5)
    }

    #[test]
    fn box_mesh_facts() {
        let m = make_mesh(&MeshSpec::Box { size: [100.0, 60.0, 40.0] }).unwrap();
        assert_eq!(m.triangles.len(), 12);
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.diameter() - (100f64.powi(2) + 60f64.powi(2) + 40f64.powi(2)).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn cup_is_a_closed_genus_one_surface() {
        let m = make_mesh(&MeshSpec::default_cup()).unwrap();
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn other_meshes_are_closed() {
        for spec in [MeshSpec::default_camera(), MeshSpec::default_bottle()] {
            let m = make_mesh(&spec).unwrap();
            assert!(m.is_closed(), "{spec:?}");
            assert!(m.surface_centroid().coords.norm() < 1e-9);
        }
    }

    #[test]
    fn doubling_dimensions_doubles_diameter() {
        for spec in [MeshSpec::default_camera(), MeshSpec::default_cup(), MeshSpec::default_bottle()] {
            let a = make_mesh(&spec).unwrap().diameter();
            let b = make_mesh(&spec.scaled(2.0)).unwrap().diameter();
            assert!((b - 2.0 * a).abs() < 1e-9 * a);
        }
    }

    #[test]
    fn degenerate_dimensions_are_rejected() {
        assert!(make_mesh(&MeshSpec::Box { size: [0.0, 1.0, 1.0] }).is_err());
        assert!(make_mesh(&MeshSpec::default_cup().scaled(-1.0)).is_err());
    }

    #[test]
    fn ascii_round_trip() {
        let m = make_mesh(&MeshSpec::default_cup()).unwrap();
        assert_eq!(Mesh::from_ascii(&m.to_ascii()).unwrap(), m);
        assert!(Mesh::from_ascii("ihf-mesh 1\nvertices 1\n0 0 0\ntriangles 1\n0 0 3\n").is_err());
        assert!(Mesh::from_ascii("mesh\n").is_err());
    }

    #[test]
    fn front_face_depth_is_exact() {
        let spec = MeshSpec::Box { size: [100.0, 60.0, 40.0] };
        let r = render_scene(&SceneSpec::clean(spec, Pose::identity_at([0.0, 0.0, 750.0])), &intr(), (640, 480)).unwrap();
        let min = r.depth.depths().iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
        assert!((min - 730.0).abs() < 1e-9, "{min}");
        assert_eq!(r.visibility, 1.0);
        // 100 mm at 730 mm spans about 72 px.
        let b = r.bbox.unwrap();
        assert!((b.width as f64 - 100.0 * 525.0 / 730.0).abs() <= 2.0, "{b:?}");
    }

    #[test]
    fn translating_in_depth_shifts_depths() {
        let mesh = make_mesh(&MeshSpec::Box { size: [100.0, 60.0, 40.0] }).unwrap();
        let a = render_mesh(&mesh, &Pose::identity_at([0.0, 0.0, 750.0]), &intr(), (640, 480)).unwrap();
        let b = render_mesh(&mesh, &Pose::identity_at([0.0, 0.0, 760.0]), &intr(), (640, 480)).unwrap();
        for (x, y) in a.depths().iter().zip(b.depths()) {
            if *x > 0.0 && *y > 0.0 {
                assert!((y - x - 10.0).abs() < 1e-9);
            }
        }
        assert!(matches!(
            render_mesh(&mesh, &Pose::identity_at([0.0, 0.0, -750.0]), &intr(), (640, 480)),
            Err(Error::OutsideFrustum)
        ));
    }

    #[test]
    fn occluder_hits_coverage_target() {
        let mesh = make_mesh(&MeshSpec::default_camera()).unwrap();
        for (side, pose) in [(0, [0.0, 0.3, 0.2]), (1, [0.0, -0.5, 0.4]), (2, [0.0, 0.1, -0.6]), (3, [0.0, 0.7, 0.0])] {
            let pose = Pose::new([10.0, -5.0, 740.0], pose);
            let object = render_mesh(&mesh, &pose, &intr(), (640, 480)).unwrap();
            let mut spec = SceneSpec::clean(MeshSpec::default_camera(), pose);
            spec.occluders = place_occluder(&object, 0.3, side, 60.0).into_iter().collect();
            let r = render_scene(&spec, &intr(), (640, 480)).unwrap();
            assert!((r.visibility - 0.7).abs() <= 0.05, "side {side}: {}", r.visibility);
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let pose = Pose::identity_at([0.0, 0.0, 750.0]);
        let mut spec = SceneSpec::clean(MeshSpec::Box { size: [200.0, 150.0, 40.0] }, pose);
        let clean = render_scene(&spec, &intr(), (640, 480)).unwrap().depth;
        spec.noise = Noise { sigma: 2.0, dropout: 0.0 };
        spec.noise_seed = 3;
        let noisy = render_scene(&spec, &intr(), (640, 480)).unwrap().depth;
        let diffs: Vec<f64> = clean
            .depths()
            .iter()
            .zip(noisy.depths())
            .filter(|(c, _)| **c > 0.0)
            .map(|(c, n)| n - c)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        assert!((sd - 2.0).abs() <= 0.2, "{sd}");
    }

    #[test]
    fn training_set_layout() {
        let cfg = BenchConfig::default();
        let set = generate_training_set(&cfg, Exec::Sequential).unwrap();
        assert_eq!(set.len(), 49);
        let mesh = make_mesh(&cfg.mesh).unwrap();
        let extent = mesh.vertices.iter().map(|v| v.coords.norm()).fold(0.0, f64::max);
        for s in &set {
            assert_eq!(s.visibility, 1.0);
            let min = s.image.depths().iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
            assert!(min >= cfg.f_d - extent && min <= cfg.f_d);
        }
    }

    #[test]
    fn test_set_is_deterministic_and_in_range() {
        let cfg = BenchConfig {
            test_count: 6,
            ..BenchConfig::default()
        };
        let a = generate_test_set(&cfg, 9, Exec::Sequential).unwrap();
        let b = generate_test_set(&cfg, 9, Exec::Parallel).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.scene, y.scene);
            assert!((700.0..=800.0).contains(&x.pose.translation[2]));
            assert!(x.crop.u0 <= x.bbox.u0 && x.crop.v0 <= x.bbox.v0 || x.crop.area() > 0);
        }
    }
}
