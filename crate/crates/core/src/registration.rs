//! Pose registration: initial Hough voting on the coarse crop, then repeated
//! rounds of rendering the current hypothesis, dropping pixels outside its
//! depth band, and voting again on the cleaned image.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{HoughForest, Vote};
use crate::geometry::{wrap_angle, DepthImage, Point3, Pose, Vector3};
use crate::hocp::{image_features, Part, PartMode, PartSpec};
use crate::par::Exec;
use crate::synthbench::{render_mesh, Mesh};
#[cfg(test)]
use rand::{Rng, SeedableRng};
#[cfg(test)]
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClutterParams {
    pub psi1: f64,
    pub psi2: f64,
    pub max_iterations: usize,
}

impl Default for ClutterParams {
    fn default() -> Self {
        ClutterParams {
            psi1: 0.95,
            psi2: 1.05,
            max_iterations: 5,
        }
    }
}

impl ClutterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi1 > 0.0 && self.psi1 <= 1.0 && self.psi2 >= 1.0 && self.psi2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < psi1 <= 1 <= psi2, got {} and {}",
                self.psi1, self.psi2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub clutter: ClutterParams,
    /// Vote accumulator bin edge (mm).
    pub bin_mm: f64,
    /// Fixed mode part size for every iteration.
    pub fixed_g: f64,
    /// Variable mode part box edge in unit-cube units, the same in every
    /// round. Removing clutter enlarges the object inside the cube, so the
    /// parts cover less of it.
    pub variable_box_edge: f64,
    /// Rotation accumulator bin (radians); `None` averages every vote of the
    /// winning translation neighbourhood.
    pub rotation_bin: Option<f64>,
    /// Aggregate the votes of all rounds so far instead of the current one.
    pub pool_rounds: bool,
    /// Anchor stride at test time (pixels).
    pub stride: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            clutter: ClutterParams::default(),
            bin_mm: 5.0,
            fixed_g: 0.5,
            variable_box_edge: 0.75,
            rotation_bin: Some(15f64.to_radians()),
            pool_rounds: true,
            stride: 2,
        }
    }
}

impl RegistrationConfig {
    pub fn part_spec(&self, mode: PartMode) -> PartSpec {
        PartSpec {
            mode,
            g: self.fixed_g,
            box_edge: self.variable_box_edge,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    pub pose: Pose,
    /// Votes that fell into the winning neighbourhood.
    pub confidence: f64,
    pub iteration: usize,
}

/// A leaf vote together with the metric center of the part that cast it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CastVote {
    pub part_center: Point3,
    pub vote: Vote,
}

impl CastVote {
    pub fn prediction(&self) -> Point3 {
        self.part_center + Vector3::from(self.vote.offset)
    }
}

fn bin_of(p: &Point3, bin: f64) -> [i64; 3] {
    [(p.x / bin).floor() as i64, (p.y / bin).floor() as i64, (p.z / bin).floor() as i64]
}

/// Accumulates object-center predictions in cubic bins of `bin_mm`, takes the
/// fullest bin (lowest bin index on ties) and keeps the votes of that bin and
/// its 26 neighbours. Translation is their arithmetic mean. With
/// `rotation_bin` set, their rotations go through a second accumulator over
/// wrapped Euler angles and only the fullest rotation bin and its neighbours
/// enter the rotation average; otherwise all kept votes do. Each Euler angle
/// is averaged circularly.
pub fn aggregate_votes(votes: &[CastVote], bin_mm: f64, rotation_bin: Option<f64>) -> Result<PoseHypothesis> {
    if votes.is_empty() {
        return Err(Error::NoVotes);
    }
    if !(bin_mm > 0.0) || rotation_bin.is_some_and(|b| !(b > 0.0)) {
        return Err(Error::InvalidParameter("bin sizes must be > 0".into()));
    }
    let bins: Vec<[i64; 3]> = votes.iter().map(|v| bin_of(&v.prediction(), bin_mm)).collect();
    let winner = fullest(&bins);
    let kept: Vec<&CastVote> = votes
        .iter()
        .zip(&bins)
        .filter(|(_, b)| (0..3).all(|a| (b[a] - winner[a]).abs() <= 1))
        .map(|(v, _)| v)
        .collect();
    let t = kept.iter().fold(Vector3::zeros(), |acc, v| acc + v.prediction().coords) / kept.len() as f64;
    let rotated: Vec<&CastVote> = match rotation_bin {
        None => kept.clone(),
        Some(b) => {
            let cycle = (std::f64::consts::TAU / b).ceil() as i64;
            let rbins: Vec<[i64; 3]> = kept
                .iter()
                .map(|v| v.vote.rotation.map(|r| (((wrap_angle(r) + std::f64::consts::PI) / b).floor() as i64).rem_euclid(cycle)))
                .collect();
            let win = fullest(&rbins);
            let near = |a: i64, w: i64| {
                let d = (a - w).rem_euclid(cycle);
                d.min(cycle - d) <= 1
            };
            kept.iter()
                .zip(&rbins)
                .filter(|(_, r)| (0..3).all(|a| near(r[a], win[a])))
                .map(|(v, _)| *v)
                .collect()
        }
    };
    let mut sc = [(0.0, 0.0); 3];
    for v in &rotated {
        for (a, acc) in sc.iter_mut().enumerate() {
            acc.0 += v.vote.rotation[a].sin();
            acc.1 += v.vote.rotation[a].cos();
        }
    }
    let rotation = sc.map(|(s, c)| wrap_angle(s.atan2(c)));
    Ok(PoseHypothesis {
        pose: Pose::new([t.x, t.y, t.z], rotation),
        confidence: kept.len() as f64,
        iteration: 0,
    })
}

fn fullest(bins: &[[i64; 3]]) -> [i64; 3] {
    let mut counts: HashMap<[i64; 3], usize> = HashMap::new();
    for b in bins {
        *counts.entry(*b).or_insert(0) += 1;
    }
    let (winner, _) = counts
        .iter()
        .max_by(|(ka, ca), (kb, cb)| ca.cmp(cb).then_with(|| kb.cmp(ka)))
        .expect("bins are nonempty");
    *winner
}

/// Depth render of the model at the hypothesized pose, in the image's frame.
pub fn render_hypothesis(model: &Mesh, pose: &Pose, like: &DepthImage) -> Result<DepthImage> {
    render_mesh(model, pose, like.intrinsics(), (like.width(), like.height()))
}

/// Keeps pixel `p` iff `gamma * psi1 < D(p) < beta * psi2`, with `gamma` and
/// `beta` the nearest and farthest depths of the hypothesis render. Returns
/// the cleaned image and the mask of removed pixels.
pub fn remove_clutter(image: &DepthImage, rendered: &DepthImage, params: &ClutterParams) -> Result<(DepthImage, Vec<bool>)> {
    params.validate()?;
    let (gamma, beta) = rendered
        .depths()
        .iter()
        .filter(|d| **d > 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    if beta == 0.0 {
        return Err(Error::EmptyHypothesis);
    }
    let (lo, hi) = (gamma * params.psi1, beta * params.psi2);
    let mut out = image.clone();
    let mut removed = vec![false; image.width() * image.height()];
    for v in 0..image.height() {
        for u in 0..image.width() {
            let d = image.get(u, v);
            if d > 0.0 && !(lo < d && d < hi) {
                out.set(u, v, 0.0);
                removed[v * image.width() + u] = true;
            }
        }
    }
    Ok((out, removed))
}

/// What one voting round saw and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub pose: Pose,
    pub confidence: f64,
    /// Depth extent of the normalized cloud.
    pub h: f64,
    /// Fixed mode: window fraction; variable mode: median part footprint
    /// over the valid-pixel count.
    pub g: f64,
    /// Variable mode metric edge of the part box.
    pub box_edge_mm: Option<f64>,
    pub median_part_px: f64,
    pub part_count: usize,
    pub max_votes_per_part: usize,
    pub valid_px: usize,
    pub removed_px: usize,
    pub omega: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<IterationRecord>,
    /// Set when the loop ended before `max_iterations`.
    pub stopped_early: Option<String>,
    /// Removed-pixel masks, one per refinement round.
    #[serde(skip)]
    pub removal_masks: Vec<Vec<bool>>,
    /// Valid-pixel masks of the round inputs, starting with the raw crop.
    #[serde(skip)]
    pub inputs: Vec<Vec<bool>>,
}

impl RefinementTrace {
    pub fn final_pose(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Votes of every part of `image` at the single scale `s = 1`, with the
/// round's record minus the pose.
fn cast_votes(
    image: &DepthImage,
    forest: &HoughForest,
    cfg: &RegistrationConfig,
    k: usize,
    exec: Exec,
) -> Result<(Vec<CastVote>, IterationRecord)> {
    let spec = cfg.part_spec(forest.mode());
    let features = image_features(image, &[1.0], &spec, &forest.meta.features, exec)?;
    let level = &features.levels[0];
    let parts: &[Part] = &level.parts;
    if parts.is_empty() {
        return Err(Error::NoParts);
    }
    let per_part = exec.map(parts, |p| forest.traverse(p));
    let max_votes_per_part = per_part.iter().map(Vec::len).max().unwrap_or(0);
    let votes: Vec<CastVote> = parts
        .iter()
        .zip(&per_part)
        .flat_map(|(p, vs)| {
            vs.iter().map(|v| CastVote {
                part_center: p.center_metric,
                vote: *v,
            })
        })
        .collect();
    let valid = image.valid_count();
    let median_part_px = median(parts.iter().map(|p| p.size_px as f64).collect());
    let g = match spec.mode {
        PartMode::Fixed => spec.g,
        PartMode::Variable => median_part_px / valid as f64,
    };
    let record = IterationRecord {
        k,
        pose: Pose::new([0.0; 3], [0.0; 3]),
        confidence: 0.0,
        h: level.h,
        g,
        box_edge_mm: match spec.mode {
            PartMode::Fixed => None,
            PartMode::Variable => Some(spec.box_edge * features.space.alpha),
        },
        median_part_px,
        part_count: parts.len(),
        max_votes_per_part,
        valid_px: valid,
        removed_px: 0,
        omega: None,
    };
    Ok((votes, record))
}

fn settle(hyp: &mut PoseHypothesis, record: &mut IterationRecord, k: usize) {
    hyp.iteration = k;
    record.k = k;
    record.pose = hyp.pose;
    record.confidence = hyp.confidence;
}

/// One voting round on `image` at the single scale `s = 1`.
pub fn register_once(
    image: &DepthImage,
    forest: &HoughForest,
    cfg: &RegistrationConfig,
    k: usize,
    exec: Exec,
) -> Result<(PoseHypothesis, IterationRecord)> {
    let (votes, mut record) = cast_votes(image, forest, cfg, k, exec)?;
    let mut hyp = aggregate_votes(&votes, cfg.bin_mm, cfg.rotation_bin)?;
    settle(&mut hyp, &mut record, k);
    Ok((hyp, record))
}

/// First hypothesis from the raw coarse crop.
pub fn initial_register(
    image: &DepthImage,
    forest: &HoughForest,
    cfg: &RegistrationConfig,
    exec: Exec,
) -> Result<(PoseHypothesis, IterationRecord)> {
    register_once(image, forest, cfg, 0, exec)
}

fn valid_mask(image: &DepthImage) -> Vec<bool> {
    image.depths().iter().map(|d| *d > 0.0).collect()
}

/// Initial registration followed by up to `max_iterations` rounds of
/// render, clutter removal and re-registration. The last record holds the
/// final answer. With `pool_rounds` each round aggregates the votes of all
/// distinct inputs so far; otherwise only its own. A round that removes
/// nothing sees the previous round's input again and reuses its votes
/// without adding them to the pool a second time.
pub fn refine_iteratively(
    image: &DepthImage,
    forest: &HoughForest,
    model: &Mesh,
    cfg: &RegistrationConfig,
    exec: Exec,
) -> Result<RefinementTrace> {
    cfg.clutter.validate()?;
    let (votes, mut record) = cast_votes(image, forest, cfg, 0, exec)?;
    let mut hyp = aggregate_votes(&votes, cfg.bin_mm, cfg.rotation_bin)?;
    settle(&mut hyp, &mut record, 0);
    let mut pool = votes.clone();
    let mut last = votes;
    let mut trace = RefinementTrace {
        iterations: vec![record],
        inputs: vec![valid_mask(image)],
        ..RefinementTrace::default()
    };
    let mut current = image.clone();
    let min_points = forest.meta.features.normal_neighbors + 1;
    for k in 1..=cfg.clutter.max_iterations {
        let rendered = match render_hypothesis(model, &hyp.pose, &current) {
            Ok(r) => r,
            Err(e) => {
                trace.stopped_early = Some(format!("iteration {k}: hypothesis render failed: {e}"));
                break;
            }
        };
        let (next, removed) = remove_clutter(&current, &rendered, &cfg.clutter)?;
        if next.valid_count() < min_points {
            trace.stopped_early = Some(format!("iteration {k}: clutter removal emptied the image"));
            break;
        }
        let removed_px = removed.iter().filter(|r| **r).count();
        let fresh = removed_px > 0;
        let cast = if fresh {
            cast_votes(&next, forest, cfg, k, exec)
        } else {
            let prev = trace.iterations.last().expect("round 0 is recorded").clone();
            Ok((last.clone(), prev))
        };
        match cast {
            Ok((votes, mut record)) => {
                if cfg.pool_rounds && fresh {
                    pool.extend_from_slice(&votes);
                }
                let mut h = aggregate_votes(if cfg.pool_rounds { &pool } else { &votes }, cfg.bin_mm, cfg.rotation_bin)?;
                settle(&mut h, &mut record, k);
                record.removed_px = removed_px;
                hyp = h;
                last = votes;
                trace.iterations.push(record);
                trace.removal_masks.push(removed);
                trace.inputs.push(valid_mask(&next));
                current = next;
            }
            Err(e @ (Error::NoParts | Error::NoVotes | Error::EmptyCloud(_) | Error::DegenerateCloud)) => {
                trace.stopped_early = Some(format!("iteration {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}
