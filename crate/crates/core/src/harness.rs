//! Pose accuracy metric and precision/recall reporting.
//!
//! A hypothesis is correct when the mean distance between the model points
//! under the true and the estimated pose is at most `z_omega` times the
//! model diameter. Every image holds one object and yields one hypothesis
//! with a confidence. At a confidence threshold, a kept hypothesis is a true
//! positive when correct and a false positive otherwise; objects without a
//! kept correct hypothesis are false negatives.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{annotate_image, train_forest, ForestParams, HoughForest, TrainingMeta, TrainingSet};
use crate::geometry::{DepthImage, Point3, Pose};
use crate::hocp::{FeatureConfig, PartMode, PartSpec};
use crate::par::Exec;
use crate::registration::{refine_iteratively, RefinementTrace, RegistrationConfig};
use crate::synthbench::{BenchConfig, DatasetManifest, Mesh, Sample};

pub fn model_diameter(points: &[Point3]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("diameter needs at least two points".into()));
    }
    let mut best: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    Ok(best.sqrt())
}

/// Mean over `points` of `|T_gt x - T_est x|`.
pub fn add_score(points: &[Point3], gt: &Pose, est: &Pose) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (a, b) = (gt.isometry(), est.isometry());
    points.iter().map(|p| (a * p - b * p).norm()).sum::<f64>() / points.len() as f64
}

pub fn is_correct(omega: f64, phi: f64, z_omega: f64) -> bool {
    omega <= z_omega * phi
}

/// `0.05, 0.06, ..., 0.15`.
pub fn z_sweep() -> Vec<f64> {
    (5..=15).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub id: String,
    pub omega: f64,
    pub phi: f64,
    pub z_omega: f64,
    pub correct: bool,
    pub confidence: f64,
}

impl MetricResult {
    pub fn new(id: impl Into<String>, omega: f64, phi: f64, z_omega: f64, confidence: f64) -> Self {
        MetricResult {
            id: id.into(),
            omega,
            phi,
            z_omega,
            correct: is_correct(omega, phi, z_omega),
            confidence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision/recall at every distinct confidence threshold, highest first.
pub fn pr_curve(results: &[MetricResult], z_omega: f64) -> Vec<PrPoint> {
    let n = results.len();
    let mut thresholds: Vec<f64> = results.iter().map(|r| r.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let kept = results.iter().filter(|r| r.confidence >= t);
            let (mut tp, mut fp) = (0, 0);
            for r in kept {
                if is_correct(r.omega, r.phi, z_omega) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
            PrPoint {
                threshold: t,
                precision,
                recall,
                f1: f1(precision, recall),
                tp,
                fp,
                fn_: n - tp,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZSummary {
    pub z_omega: f64,
    /// Best F1 along the precision/recall curve.
    pub f1: f64,
    /// Share of images whose hypothesis is correct.
    pub accuracy: f64,
    pub curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<MetricResult>,
    pub sweep: Vec<ZSummary>,
    /// F1 averaged over the sweep.
    pub mean_f1: f64,
    pub mean_omega: f64,
    pub config: serde_json::Value,
}

pub fn pr_f1(results: &[MetricResult], sweep: &[f64], config: serde_json::Value) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::EmptyDataset("no results to report".into()));
    }
    let summaries: Vec<ZSummary> = sweep
        .iter()
        .map(|z| {
            let curve = pr_curve(results, *z);
            let f1 = curve.iter().map(|p| p.f1).fold(0.0, f64::max);
            let correct = results.iter().filter(|r| is_correct(r.omega, r.phi, *z)).count();
            ZSummary {
                z_omega: *z,
                f1,
                accuracy: correct as f64 / results.len() as f64,
                curve,
            }
        })
        .collect();
    let mean_f1 = summaries.iter().map(|s| s.f1).sum::<f64>() / summaries.len().max(1) as f64;
    Ok(Report {
        results: results.to_vec(),
        sweep: summaries,
        mean_f1,
        mean_omega: results.iter().map(|r| r.omega).sum::<f64>() / results.len() as f64,
        config,
    })
}

impl Report {
    pub fn f1_at(&self, z_omega: f64) -> Option<f64> {
        self.sweep.iter().find(|s| (s.z_omega - z_omega).abs() < 1e-12).map(|s| s.f1)
    }

    /// One row per image: id, omega, confidence, then correctness at every z.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,omega,confidence");
        for z in &self.sweep {
            let _ = write!(s, ",correct@{:.2}", z.z_omega);
        }
        s.push('\n');
        for r in &self.results {
            let _ = write!(s, "{},{:.6},{}", r.id, r.omega, r.confidence);
            for z in &self.sweep {
                let _ = write!(s, ",{}", is_correct(r.omega, r.phi, z.z_omega) as u8);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Precision/recall points for plotting: `z_omega threshold precision recall f1`.
    pub fn to_pr_tsv(&self) -> String {
        let mut s = String::from("z_omega\tthreshold\tprecision\trecall\tf1\n");
        for z in &self.sweep {
            for p in &z.curve {
                let _ = writeln!(s, "{:.2}\t{}\t{:.6}\t{:.6}\t{:.6}", z.z_omega, p.threshold, p.precision, p.recall, p.f1);
            }
        }
        s
    }
}

/// Every knob of the pipeline in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub mode: PartMode,
    pub bench: BenchConfig,
    pub features: FeatureConfig,
    /// Anchor stride for training images (pixels).
    pub training_stride: usize,
    pub forest: ForestParams,
    pub registration: RegistrationConfig,
    pub z_omega: f64,
    /// Surface samples of the model used by the accuracy metric.
    pub model_points: usize,
    pub exec: Exec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            mode: PartMode::Fixed,
            bench: BenchConfig::default(),
            features: FeatureConfig::default(),
            training_stride: 10,
            forest: ForestParams::default(),
            registration: RegistrationConfig::default(),
            z_omega: 0.08,
            model_points: 1000,
            exec: Exec::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training_spec().validate()?;
        self.registration.part_spec(self.mode).validate()?;
        self.registration.clutter.validate()?;
        self.forest.validate()?;
        self.features.hocp.validate()?;
        if !(self.z_omega > 0.0) || self.model_points < 2 {
            return Err(Error::InvalidParameter("need z_omega > 0 and model_points >= 2".into()));
        }
        Ok(())
    }

    pub fn training_spec(&self) -> PartSpec {
        PartSpec {
            stride: self.training_stride,
            ..self.registration.part_spec(self.mode)
        }
    }

    pub fn training_meta(&self) -> TrainingMeta {
        TrainingMeta {
            f_d: self.bench.f_d,
            spec: self.training_spec(),
            features: self.features.clone(),
        }
    }
}

/// A test image with its ground truth.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: DepthImage,
    pub pose: Pose,
}

pub fn cases_from_samples(samples: &[Sample]) -> Vec<Case> {
    samples
        .iter()
        .map(|s| Case {
            id: s.id.clone(),
            image: s.image.clone(),
            pose: s.pose,
        })
        .collect()
}

pub fn cases_from_manifest(path: &Path) -> Result<(DatasetManifest, Vec<Case>)> {
    let manifest = DatasetManifest::load(path)?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset(format!("manifest {} has no entries", path.display())));
    }
    let cases = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Case {
                id: e.id.clone(),
                image: manifest.load_image(path, e)?,
                pose: e.pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}

/// Featurizes and annotates every training image.
pub fn training_set(cases: &[Case], cfg: &Config) -> Result<TrainingSet> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    let meta = cfg.training_meta();
    let per_image = cfg.exec.map(cases, |c| annotate_image(&c.image, &c.pose, &meta, cfg.exec));
    let mut parts = Vec::new();
    for p in per_image {
        parts.extend(p?);
    }
    Ok(TrainingSet { parts, meta })
}

pub fn train(cases: &[Case], cfg: &Config) -> Result<HoughForest> {
    let set = training_set(cases, cfg)?;
    let mut params = cfg.forest.clone();
    params.seed = cfg.seed;
    train_forest(&set, &params, cfg.exec)
}

/// Model points and diameter for the accuracy metric.
#[derive(Clone, Debug)]
pub struct ModelReference {
    pub points: Vec<Point3>,
    pub diameter: f64,
}

impl ModelReference {
    pub fn new(mesh: &Mesh, count: usize, seed: u64) -> Result<Self> {
        Ok(ModelReference {
            points: mesh.surface_samples(count, seed),
            diameter: model_diameter(&mesh.vertices)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub poses: Vec<Pose>,
    pub traces: Vec<RefinementTrace>,
    pub phi: f64,
    pub z_omega: f64,
}

impl Evaluation {
    /// Rounds every trace covers; early stops repeat their last round.
    pub fn rounds(&self) -> usize {
        self.traces.iter().map(|t| t.iterations.len()).max().unwrap_or(0)
    }

    /// Metric results of the hypotheses after round `k`.
    pub fn results_at(&self, k: usize) -> Vec<MetricResult> {
        self.traces
            .iter()
            .zip(&self.ids)
            .filter_map(|(t, id)| {
                let r = t.iterations.get(k).or(t.iterations.last())?;
                Some(MetricResult::new(id.clone(), r.omega?, self.phi, self.z_omega, r.confidence))
            })
            .collect()
    }

    pub fn final_results(&self) -> Vec<MetricResult> {
        self.results_at(usize::MAX)
    }

    pub fn fraction_correct_at(&self, k: usize) -> f64 {
        let rs = self.results_at(k);
        rs.iter().filter(|r| r.correct).count() as f64 / rs.len().max(1) as f64
    }

    pub fn mean_omega_at(&self, k: usize) -> f64 {
        let rs = self.results_at(k);
        rs.iter().map(|r| r.omega).sum::<f64>() / rs.len().max(1) as f64
    }
}

/// Registers every case and scores each round against the ground truth.
pub fn evaluate(forest: &HoughForest, mesh: &Mesh, cases: &[Case], cfg: &Config) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no test images".into()));
    }
    let reference = ModelReference::new(mesh, cfg.model_points, cfg.seed)?;
    let mut traces = Vec::with_capacity(cases.len());
    for case in cases {
        let mut trace = refine_iteratively(&case.image, forest, mesh, &cfg.registration, cfg.exec)?;
        for r in &mut trace.iterations {
            r.omega = Some(add_score(&reference.points, &case.pose, &r.pose));
        }
        traces.push(trace);
    }
    Ok(Evaluation {
        ids: cases.iter().map(|c| c.id.clone()).collect(),
        poses: cases.iter().map(|c| c.pose).collect(),
        traces,
        phi: reference.diameter,
        z_omega: cfg.z_omega,
    })
}

pub fn report(evaluation: &Evaluation, cfg: &Config) -> Result<Report> {
    pr_f1(&evaluation.final_results(), &z_sweep(), serde_json::to_value(cfg)?)
}

/// Writes `report.csv`, `report.json` and `pr.tsv` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("pr.tsv"), report.to_pr_tsv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-30.0..30.0), rng.gen_range(-20.0..20.0)))
            .collect()
    }

    #[test]
    fn diameter_of_cube_corners() {
        let pts: Vec<Point3> = (0..8).map(|i| Point3::new((i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64)).collect();
        assert!((model_diameter(&pts).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert!(model_diameter(&pts[..1]).is_err());
    }

    #[test]
    fn add_identities() {
        let pts = cloud(500, 1);
        let gt = Pose::new([10.0, -20.0, 750.0], [0.1, -0.4, 0.9]);
        assert_eq!(add_score(&pts, &gt, &gt), 0.0);
        let t = [3.0, -4.0, 12.0];
        let moved = Pose::new([gt.translation[0] + t[0], gt.translation[1] + t[1], gt.translation[2] + t[2]], gt.rotation);
        assert!((add_score(&pts, &gt, &moved) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn add_matches_per_point_average_for_rotation() {
        let pts = cloud(300, 2);
        let gt = Pose::new([0.0, 0.0, 750.0], [0.0, 0.0, 0.0]);
        let est = Pose::new([0.0, 0.0, 750.0], [0.0, 0.0, 10f64.to_radians()]);
        let (c, s) = (10f64.to_radians().cos(), 10f64.to_radians().sin());
        let brute = pts
            .iter()
            .map(|p| {
                let r = Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z);
                (r - p.coords).norm()
            })
            .sum::<f64>()
            / pts.len() as f64;
        assert!((add_score(&pts, &gt, &est) - brute).abs() < 1e-9);
    }

    #[test]
    fn add_is_invariant_under_common_motion() {
        let pts = cloud(200, 3);
        let gt = Pose::new([5.0, 1.0, 700.0], [0.2, 0.1, -0.3]);
        let est = Pose::new([8.0, -2.0, 710.0], [0.25, 0.05, -0.2]);
        let t = Pose::new([30.0, -10.0, 40.0], [0.7, -0.2, 1.1]).isometry();
        let gt2 = Pose::from_isometry(&(t * gt.isometry()));
        let est2 = Pose::from_isometry(&(t * est.isometry()));
        assert!((add_score(&pts, &gt, &est) - add_score(&pts, &gt2, &est2)).abs() < 1e-9);
    }

    #[test]
    fn correctness_boundary() {
        assert!(is_correct(0.0, 100.0, 0.05));
        assert!(is_correct(8.0, 100.0, 0.08));
        assert!(!is_correct(8.1, 100.0, 0.08));
    }

    #[test]
    fn all_correct_scores_one() {
        let rs: Vec<_> = (0..5).map(|i| MetricResult::new(format!("{i}"), 1.0, 100.0, 0.08, 10.0)).collect();
        let rep = pr_f1(&rs, &z_sweep(), serde_json::Value::Null).unwrap();
        for s in &rep.sweep {
            assert_eq!(s.f1, 1.0);
        }
    }

    #[test]
    fn half_correct_at_uniform_confidence() {
        let rs: Vec<_> = (0..10)
            .map(|i| MetricResult::new(format!("{i}"), if i % 2 == 0 { 1.0 } else { 50.0 }, 100.0, 0.08, 7.0))
            .collect();
        let curve = pr_curve(&rs, 0.08);
        assert_eq!(curve.len(), 1);
        let p = curve[0];
        assert_eq!((p.tp, p.fp, p.fn_), (5, 5, 5));
        assert_eq!(p.tp + p.fn_, 10);
        assert_eq!((p.precision, p.recall), (0.5, 0.5));
        assert_eq!(p.f1, 0.5);
        assert_eq!(f1(0.5, 1.0), 2.0 / 3.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn f1_is_monotone_in_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rs: Vec<_> = (0..40)
            .map(|i| MetricResult::new(format!("{i}"), rng.gen_range(0.0..20.0), 100.0, 0.08, rng.gen_range(1.0..50.0)))
            .collect();
        let rep = pr_f1(&rs, &z_sweep(), serde_json::Value::Null).unwrap();
        for w in rep.sweep.windows(2) {
            assert!(w[1].f1 >= w[0].f1);
            for p in &w[1].curve {
                assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            }
        }
        assert!(pr_f1(&[], &z_sweep(), serde_json::Value::Null).is_err());
    }
}
