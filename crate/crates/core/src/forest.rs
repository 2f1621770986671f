//! Hough forest over HoCP part features.
//!
//! Split nodes compare a part against a stored template part (depth-checked
//! histogram distance) and send it left when the distance is below the node
//! threshold. Leaves keep the offset and rotation labels of the training
//! parts that reached them.

use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, DepthImage, Pose};
use crate::hocp::{image_features, DepthPatch, FeatureConfig, HoCPFeature, ImageFeatures, Part, PartMode, PartSpec, Template};
use crate::par::Exec;

const MAGIC: &[u8; 4] = b"IHF1";
const VERSION: u32 = 1;
const COV_EPS: f64 = 1e-6;

/// Offset (object center minus part center, mm) and rotation label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub offset: [f64; 3],
    pub rotation: [f64; 3],
}

impl Vote {
    pub fn of(part: &Part) -> Self {
        Vote {
            offset: part.offset,
            rotation: part.rotation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub tree_count: usize,
    pub max_depth: usize,
    pub max_leaf_samples: usize,
    /// Templates drawn per node.
    pub template_candidates: usize,
    /// Thresholds drawn per template.
    pub threshold_candidates: usize,
    /// Share of the training parts each tree sees, drawn without replacement.
    pub bootstrap_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            tree_count: 3,
            max_depth: 25,
            max_leaf_samples: 15,
            template_candidates: 20,
            threshold_candidates: 10,
            bootstrap_fraction: 0.7,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 || self.max_leaf_samples == 0 {
            return Err(Error::InvalidParameter("tree_count and max_leaf_samples must be >= 1".into()));
        }
        if self.template_candidates == 0 || self.threshold_candidates == 0 {
            return Err(Error::InvalidParameter("candidate counts must be >= 1".into()));
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return Err(Error::InvalidParameter("bootstrap_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// How the training parts were produced; inference must featurize the same way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Nominal training depth (mm).
    pub f_d: f64,
    pub spec: PartSpec,
    pub features: FeatureConfig,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub parts: Vec<Part>,
    pub meta: TrainingMeta,
}

/// Labels every featurized part with the offset from its center to the
/// object center and the image's rotation.
pub fn annotate_parts(features: ImageFeatures, gt: &Pose) -> Vec<Part> {
    let mut out = Vec::new();
    for level in features.levels {
        if level.parts.is_empty() {
            log::warn!("scale level {} produced no parts, skipped", level.level);
        }
        for mut p in level.parts {
            p.offset = [
                gt.translation[0] - p.center_metric.x,
                gt.translation[1] - p.center_metric.y,
                gt.translation[2] - p.center_metric.z,
            ];
            p.rotation = gt.rotation;
            out.push(p);
        }
    }
    out
}

/// Featurizes a clean training render over the configured scale space and
/// annotates its parts.
pub fn annotate_image(image: &DepthImage, gt: &Pose, meta: &TrainingMeta, exec: Exec) -> Result<Vec<Part>> {
    let features = image_features(image, &meta.features.scales, &meta.spec, &meta.features, exec)?;
    Ok(annotate_parts(features, gt))
}

pub fn similarity(part: &Part, template: &Template, meta: &TrainingMeta) -> f64 {
    part.template_distance(template, &meta.features.hocp)
}

fn log_det(cov: Matrix3<f64>) -> f64 {
    (cov + Matrix3::identity() * COV_EPS).determinant().max(f64::MIN_POSITIVE).ln()
}

/// Per-vote labels laid out for repeated entropy evaluation over subsets.
struct Labels {
    offsets: Vec<[f64; 3]>,
    rotations: Vec<[f64; 3]>,
    sincos: Vec<[(f64, f64); 3]>,
}

impl Labels {
    fn new<'a>(votes: impl Iterator<Item = &'a Vote>) -> Self {
        let mut l = Labels {
            offsets: Vec::new(),
            rotations: Vec::new(),
            sincos: Vec::new(),
        };
        for v in votes {
            l.offsets.push(v.offset);
            l.rotations.push(v.rotation);
            l.sincos.push(v.rotation.map(f64::sin_cos));
        }
        l
    }

    fn all(&self) -> Vec<u32> {
        (0..self.offsets.len() as u32).collect()
    }

    fn entropy(&self, sel: &[u32]) -> f64 {
        if sel.is_empty() {
            return 0.0;
        }
        let n = sel.len() as f64;
        let mut mean = [0.0; 3];
        let mut sc = [(0.0, 0.0); 3];
        for &i in sel {
            let (o, t) = (&self.offsets[i as usize], &self.sincos[i as usize]);
            for a in 0..3 {
                mean[a] += o[a];
                sc[a].0 += t[a].0;
                sc[a].1 += t[a].1;
            }
        }
        let mean = mean.map(|m| m / n);
        let circ = sc.map(|(s, c)| s.atan2(c));
        let mut cov_o = Matrix3::zeros();
        let mut cov_r = Matrix3::zeros();
        for &i in sel {
            let o = &self.offsets[i as usize];
            let r = &self.rotations[i as usize];
            let d: [f64; 3] = std::array::from_fn(|a| o[a] - mean[a]);
            let e: [f64; 3] = std::array::from_fn(|a| wrap_angle(r[a] - circ[a]));
            for a in 0..3 {
                for b in a..3 {
                    cov_o[(a, b)] += d[a] * d[b];
                    cov_r[(a, b)] += e[a] * e[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..a {
                cov_o[(a, b)] = cov_o[(b, a)];
                cov_r[(a, b)] = cov_r[(b, a)];
            }
        }
        0.5 * log_det(cov_o / n) + 0.5 * log_det(cov_r / n)
    }

    fn gain(&self, parent: f64, left: &[u32], right: &[u32]) -> f64 {
        if left.is_empty() || right.is_empty() {
            return f64::NEG_INFINITY;
        }
        let n = (left.len() + right.len()) as f64;
        parent - (left.len() as f64 * self.entropy(left) + right.len() as f64 * self.entropy(right)) / n
    }
}

/// Gaussian entropy proxy `1/2 log det(cov + eps I)` of the offsets plus the
/// same of the rotations, whose deviations are taken about the per-angle
/// circular mean.
pub fn label_entropy<'a>(votes: impl Iterator<Item = &'a Vote>) -> f64 {
    let labels = Labels::new(votes);
    labels.entropy(&labels.all())
}

/// Entropy reduction of a split; `-inf` when a side is empty.
pub fn split_quality(left: &[Vote], right: &[Vote]) -> f64 {
    let labels = Labels::new(left.iter().chain(right));
    let all = labels.all();
    let (l, r) = all.split_at(left.len());
    labels.gain(labels.entropy(&all), l, r)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        template: Template,
        tau: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        votes: Vec<Vote>,
    },
}

impl Node {
    pub fn node_count(&self) -> usize {
        match self {
            Node::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
            Node::Leaf { .. } => 1,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            Node::Leaf { .. } => 0,
        }
    }

    pub fn leaves(&self) -> Vec<&[Vote]> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a [Vote]>) {
        match self {
            Node::Split { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
            Node::Leaf { votes } => out.push(votes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoughForest {
    pub params: ForestParams,
    pub meta: TrainingMeta,
    pub trees: Vec<Node>,
}

struct Grower<'a> {
    parts: &'a [Part],
    params: &'a ForestParams,
    meta: &'a TrainingMeta,
    exec: Exec,
}

struct Candidate {
    gain: f64,
    template: usize,
    tau: f64,
    /// Similarity of every node part to the template.
    scores: Vec<f64>,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Node {
        let cap = self.params.max_leaf_samples;
        let votes = if idx.len() <= cap {
            idx.iter().map(|i| Vote::of(&self.parts[*i])).collect()
        } else {
            let mut pick = sample(rng, idx.len(), cap).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| Vote::of(&self.parts[idx[k]])).collect()
        };
        Node::Leaf { votes }
    }

    fn evaluate(&self, idx: &[usize], labels: &Labels, parent: f64, template: usize, seed: u64) -> Option<Candidate> {
        let tpl = self.parts[template].template()?;
        let scores: Vec<f64> = idx.iter().map(|i| similarity(&self.parts[*i], &tpl, self.meta)).collect();
        let finite = scores.iter().copied().filter(|s| s.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
        if !lo.is_finite() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taus: Vec<f64> = if hi > lo {
            (0..self.params.threshold_candidates).map(|_| rng.gen_range(lo..hi)).collect()
        } else {
            // Only the finite/infinite split remains.
            vec![lo + lo.abs().max(1.0) * 1e-9]
        };
        let mut best: Option<(f64, f64)> = None;
        let (mut left, mut right) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
        for tau in taus {
            left.clear();
            right.clear();
            for (k, s) in scores.iter().enumerate() {
                if *s < tau {
                    left.push(k as u32);
                } else {
                    right.push(k as u32);
                }
            }
            let gain = labels.gain(parent, &left, &right);
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, tau));
            }
        }
        best.map(|(gain, tau)| Candidate {
            gain,
            template,
            tau,
            scores,
        })
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> Node {
        if depth >= self.params.max_depth || idx.len() <= self.params.max_leaf_samples {
            return self.leaf(&idx, rng);
        }
        let labels = Labels::new(idx.iter().map(|i| Vote::of(&self.parts[*i])).collect::<Vec<_>>().iter());
        let parent = labels.entropy(&labels.all());
        let draws: Vec<(usize, u64)> = (0..self.params.template_candidates)
            .map(|_| (idx[rng.gen_range(0..idx.len())], rng.gen()))
            .collect();
        let best = self
            .exec
            .map(&draws, |(t, seed)| self.evaluate(&idx, &labels, parent, *t, *seed))
            .into_iter()
            .flatten()
            .fold(None::<Candidate>, |acc, c| match acc {
                Some(a) if a.gain >= c.gain => Some(a),
                _ => Some(c),
            });
        let Some(best) = best.filter(|b| b.gain > 1e-12) else {
            return self.leaf(&idx, rng);
        };
        let template = self.parts[best.template].template().expect("candidate templates are featurized");
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (i, s) in idx.iter().zip(&best.scores) {
            if *s < best.tau {
                left.push(*i);
            } else {
                right.push(*i);
            }
        }
        Node::Split {
            template,
            tau: best.tau,
            left: Box::new(self.grow(left, depth + 1, rng)),
            right: Box::new(self.grow(right, depth + 1, rng)),
        }
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64 + 1);
    rng
}

/// Grows a single tree on the parts listed in `subset`.
pub fn grow_tree(
    parts: &[Part],
    subset: Vec<usize>,
    params: &ForestParams,
    meta: &TrainingMeta,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Node {
    let grower = Grower {
        parts,
        params,
        meta,
        exec,
    };
    grower.grow(subset, 0, rng)
}

/// Grows `tree_count` trees, each on its own subsample of the parts. Every
/// tree draws from a random stream fixed by `(seed, tree index)`, so the
/// result does not depend on the execution policy.
pub fn train_forest(set: &TrainingSet, params: &ForestParams, exec: Exec) -> Result<HoughForest> {
    params.validate()?;
    if set.parts.is_empty() {
        return Err(Error::EmptyDataset("training set has no parts".into()));
    }
    if let Some(p) = set.parts.iter().find(|p| p.feature.is_none()) {
        return Err(Error::InvalidParameter(format!("training part at {:?} is not featurized", p.center_px)));
    }
    let n = set.parts.len();
    let take = ((n as f64 * params.bootstrap_fraction).round() as usize).clamp(1, n);
    let trees = exec.map_range(params.tree_count, |t| {
        let mut rng = tree_rng(params.seed, t);
        let mut subset = sample(&mut rng, n, take).into_vec();
        subset.sort_unstable();
        grow_tree(&set.parts, subset, params, &set.meta, &mut rng, exec)
    });
    Ok(HoughForest {
        params: params.clone(),
        meta: set.meta.clone(),
        trees,
    })
}

/// Similarity scores met on one root-to-leaf path and the leaf reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Route<'a> {
    pub scores: Vec<f64>,
    pub votes: &'a [Vote],
}

impl HoughForest {
    pub fn mode(&self) -> PartMode {
        self.meta.spec.mode
    }

    pub fn route<'a>(&'a self, tree: usize, part: &Part) -> Route<'a> {
        let mut node = &self.trees[tree];
        let mut scores = Vec::new();
        loop {
            match node {
                Node::Split {
                    template,
                    tau,
                    left,
                    right,
                } => {
                    let s = similarity(part, template, &self.meta);
                    scores.push(s);
                    node = if s < *tau { left } else { right };
                }
                Node::Leaf { votes } => return Route { scores, votes },
            }
        }
    }

    /// Leaf votes from every tree, concatenated in tree order.
    pub fn traverse(&self, part: &Part) -> Vec<Vote> {
        (0..self.trees.len()).flat_map(|t| self.route(t, part).votes.iter().copied()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let header = serde_json::to_vec(&Header {
            params: self.params.clone(),
            meta: self.meta.clone(),
        })?;
        w.u32(header.len() as u32);
        w.0.extend_from_slice(&header);
        w.0.push(match self.mode() {
            PartMode::Fixed => 0,
            PartMode::Variable => 1,
        });
        w.u32(self.trees.len() as u32);
        for t in &self.trees {
            w.node(t);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptModel("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptModel(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
        let mode = match r.u8()? {
            0 => PartMode::Fixed,
            1 => PartMode::Variable,
            m => return Err(Error::CorruptModel(format!("unknown mode tag {m}"))),
        };
        if mode != header.meta.spec.mode {
            return Err(Error::CorruptModel("mode tag disagrees with header".into()));
        }
        let count = r.u32()? as usize;
        let limit = header.params.max_depth;
        let mut trees = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            trees.push(r.node(0, limit)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptModel("trailing bytes".into()));
        }
        Ok(HoughForest {
            params: header.params,
            meta: header.meta,
            trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: ForestParams,
    meta: TrainingMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn node(&mut self, node: &Node) {
        match node {
            Node::Split {
                template,
                tau,
                left,
                right,
            } => {
                self.0.push(0);
                self.f64(*tau);
                let f = &template.feature;
                for v in f.nu {
                    self.u32(v as u32);
                }
                self.f64(f.r_min);
                self.f64(f.r_max);
                for b in &f.bins {
                    self.u32(*b);
                }
                let (di0, dj0, w, h, depth) = template.depth_map.raw();
                self.i32(di0);
                self.i32(dj0);
                self.u32(w as u32);
                self.u32(h as u32);
                for d in depth {
                    self.0.extend_from_slice(&d.to_bits().to_le_bytes());
                }
                self.node(left);
                self.node(right);
            }
            Node::Leaf { votes } => {
                self.0.push(1);
                self.u32(votes.len() as u32);
                for v in votes {
                    for x in v.offset.iter().chain(&v.rotation) {
                        self.f64(*x);
                    }
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptModel(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn node(&mut self, depth: usize, limit: usize) -> Result<Node> {
        if depth > limit {
            return Err(Error::CorruptModel("tree deeper than max_depth".into()));
        }
        match self.u8()? {
            0 => {
                let tau = self.f64()?;
                let nu = [self.u32()? as usize, self.u32()? as usize, self.u32()? as usize];
                let r_min = self.f64()?;
                let r_max = self.f64()?;
                let dim = nu.iter().try_fold(1usize, |a, b| a.checked_mul(*b));
                let dim = dim.filter(|d| *d <= (self.bytes.len() - self.pos) / 4);
                let dim = dim.ok_or_else(|| Error::CorruptModel("bad feature dimension".into()))?;
                let bins = (0..dim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
                let di0 = self.i32()?;
                let dj0 = self.i32()?;
                let w = self.u32()? as usize;
                let h = self.u32()? as usize;
                if w.saturating_mul(h) > (self.bytes.len() - self.pos) / 4 {
                    return Err(Error::CorruptModel("bad depth patch size".into()));
                }
                let cells = (0..w * h)
                    .map(|_| self.u32().map(f32::from_bits))
                    .collect::<Result<Vec<_>>>()?;
                let template = Template {
                    feature: HoCPFeature { bins, nu, r_min, r_max },
                    depth_map: DepthPatch::from_raw(di0, dj0, w, h, cells)?,
                };
                let left = Box::new(self.node(depth + 1, limit)?);
                let right = Box::new(self.node(depth + 1, limit)?);
                Ok(Node::Split {
                    template,
                    tau,
                    left,
                    right,
                })
            }
            1 => {
                let n = self.u32()? as usize;
                if n == 0 || n > (self.bytes.len() - self.pos) / 48 {
                    return Err(Error::CorruptModel("bad leaf size".into()));
                }
                let mut votes = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut x = [0.0; 6];
                    for v in &mut x {
                        *v = self.f64()?;
                    }
                    votes.push(Vote {
                        offset: [x[0], x[1], x[2]],
                        rotation: [x[3], x[4], x[5]],
                    });
                }
                Ok(Node::Leaf { votes })
            }
            t => Err(Error::CorruptModel(format!("unknown node tag {t}"))),
        }
    }
}
