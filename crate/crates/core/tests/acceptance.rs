//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Oracles here are independent of the library
//! code paths they check.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use ihf::forest::train_forest;
use ihf::geometry::{Point3, Pose, Vector3};
use ihf::harness::{add_score, cases_from_samples, evaluate, pr_f1, training_set, z_sweep, Config, Evaluation, MetricResult};
use ihf::hocp::{hocp_histogram, HoCPFeature, PartMode};
use ihf::ibs::{blend, fit_3l, ControlDescriptor, ControlLattice, FitParams};
use ihf::synthbench::{generate_test_set, generate_training_set, make_mesh, Mesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OCCLUDED_SEED: u64 = 1;
const CLEAN_SEED: u64 = 2;
const SCENES: usize = 30;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn timed(budget_s: f64, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let secs = t.elapsed().as_secs_f64();
    o.passed &= secs < budget_s;
    o.detail = format!("{} [{secs:.1}s of {budget_s}s]", o.detail);
    o
}

fn cardinal_cubic(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

fn blending() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let worst = (0..10_000)
        .map(|_| (blend(rng.gen()).unwrap().iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let zero = blend(0.0).unwrap();
    let exact = zero == [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0];
    outcome(worst <= 1e-12 && exact, format!("max |sum - 1| {worst:.2e}, blend(0) = {zero:?}"))
}

fn tensor_sum() -> Outcome {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lat = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let d = lat.delta();
    let basis = |c: f64, m: usize| cardinal_cubic(c / d - (m as f64 - 2.0));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = Point3::new(rng.gen(), rng.gen(), rng.gen());
        let mut f = 0.0;
        for i in 1..=n {
            for j in 1..=n {
                for k in 1..=n {
                    f += lat.get(i - 1, j - 1, k - 1) * basis(x.x, i) * basis(x.y, j) * basis(x.z, k);
                }
            }
        }
        worst = worst.max((lat.evaluate(&x).unwrap() - f).abs());
    }
    outcome(worst <= 1e-9, format!("max deviation {worst:.2e} over 1000 points"))
}

fn sphere(count: usize, radius: f64, rng: &mut ChaCha8Rng) -> (Vec<Point3>, Vec<Vector3>) {
    let c = Point3::new(0.5, 0.5, 0.5);
    let (mut pts, mut normals) = (Vec::new(), Vec::new());
    while pts.len() < count {
        let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let len = d.norm();
        if !(1e-3..=1.0).contains(&len) {
            continue;
        }
        pts.push(c + d * (radius / len));
        normals.push(d / len);
    }
    (pts, normals)
}

fn sphere_fit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (pts, normals) = sphere(2000, 0.3, &mut rng);
    let params = FitParams {
        resolution: 50,
        lambda: 1e-6,
        ..FitParams::default()
    };
    let fit = fit_3l(&pts, &normals, &params).unwrap();
    let f = |p: &Point3| fit.lattice.evaluate(p).unwrap();
    let rms = (pts.iter().map(|p| f(p).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    let delta = fit.lattice.delta();
    let (mut probes, mut right) = (0, 0);
    while probes < 2000 {
        let p = Point3::new(rng.gen(), rng.gen(), rng.gen());
        let dist = (p - Point3::new(0.5, 0.5, 0.5)).norm() - 0.3;
        if dist.abs() < delta {
            continue;
        }
        probes += 1;
        right += usize::from((f(&p) > 0.0) == (dist > 0.0));
    }
    let frac = right as f64 / probes as f64;
    outcome(rms <= 0.1 && frac >= 0.98, format!("surface rms {rms:.4}, sign split {frac:.4}"))
}

fn histograms() -> Outcome {
    let nu = [4, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = Point3::new(0.5, 0.5, 0.5);
    let desc = |p: Point3| ControlDescriptor {
        index: [1, 1, 1],
        weight: 1.0,
        position: p,
    };
    let rels: Vec<Vector3> = (0..500)
        .map(|_| Vector3::new(rng.gen_range(-0.45..0.45), rng.gen_range(-0.45..0.45), rng.gen_range(-0.45..0.45)))
        .collect();
    let base = hocp_histogram(&rels.iter().map(|r| desc(c + r)).collect::<Vec<_>>(), &c, nu, 1.0 / 16.0).unwrap();
    let mut shift_ok = true;
    for steps in 1..nu[2] {
        let (s, co) = (steps as f64 * 2.0 * PI / nu[2] as f64).sin_cos();
        let turned: Vec<_> = rels.iter().map(|r| desc(c + Vector3::new(co * r.x - s * r.y, s * r.x + co * r.y, r.z))).collect();
        let f = hocp_histogram(&turned, &c, nu, 1.0 / 16.0).unwrap();
        for rb in 0..nu[0] {
            for ib in 0..nu[1] {
                for ab in 0..nu[2] {
                    let moved = HoCPFeature::index(nu, rb, ib, (ab + steps) % nu[2]);
                    shift_ok &= base.bins[HoCPFeature::index(nu, rb, ib, ab)] == f.bins[moved];
                }
            }
        }
    }
    outcome(
        base.total() == 500 && base.dimension() == 256 && shift_ok,
        format!("total {}, dimension {}, azimuth shifts exact: {shift_ok}", base.total(), base.dimension()),
    )
}

fn metric(results: &[MetricResult]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pts: Vec<Point3> = (0..500).map(|_| Point3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))).collect();
    let gt = Pose::new([5.0, -3.0, 720.0], [0.2, -0.4, 1.1]);
    let same = add_score(&pts, &gt, &gt);
    let t = [3.5, -7.25, 12.0];
    let moved = Pose::new([gt.translation[0] + t[0], gt.translation[1] + t[1], gt.translation[2] + t[2]], gt.rotation);
    let err = (add_score(&pts, &gt, &moved) - Vector3::from(t).norm()).abs();
    let sweep = z_sweep();
    let mut monotone = true;
    for w in sweep.windows(2) {
        let a = pr_f1(results, &[w[0]], serde_json::Value::Null).unwrap().sweep[0].f1;
        let b = pr_f1(results, &[w[1]], serde_json::Value::Null).unwrap().sweep[0].f1;
        monotone &= b >= a;
    }
    outcome(
        same == 0.0 && err <= 1e-12 && monotone,
        format!("identical {same}, translation error {err:.1e}, F1 monotone over sweep: {monotone}"),
    )
}

fn count_at(e: &Evaluation, k: usize) -> usize {
    e.results_at(k).iter().filter(|r| r.correct).count()
}

fn f1_at(e: &Evaluation, k: usize, z: f64) -> f64 {
    pr_f1(&e.results_at(k), &[z], serde_json::Value::Null).unwrap().sweep[0].f1
}

fn iteration_trend(e: &Evaluation, k: usize) -> Outcome {
    let counts: Vec<usize> = (0..=k).map(|i| count_at(e, i)).collect();
    let omegas: Vec<f64> = (0..=k).map(|i| e.mean_omega_at(i)).collect();
    let mut steady = true;
    for a in 0..=k {
        for b in a + 1..=k {
            steady &= counts[b] + 1 >= counts[a];
        }
    }
    outcome(
        omegas[k] <= omegas[0] && steady,
        format!(
            "correct per round {counts:?} of {}, mean omega {:.2} -> {:.2} mm",
            e.ids.len(),
            omegas[0],
            omegas[k]
        ),
    )
}

/// Violation counts per invariant: h under removal, variable part size,
/// vote bound, subset property.
fn invariants(evals: &[&Evaluation], bound: usize) -> Outcome {
    let mut counts = [0usize; 4];
    let mut first: Vec<String> = Vec::new();
    let mut note = |i: usize, msg: String, counts: &mut [usize; 4]| {
        if counts[i] == 0 {
            first.push(msg);
        }
        counts[i] += 1;
    };
    let mut rounds = 0;
    for e in evals {
        for (t, id) in e.traces.iter().zip(&e.ids) {
            rounds += t.iterations.len();
            for w in t.iterations.windows(2) {
                if w[1].removed_px > 0 && w[1].h < w[0].h {
                    note(0, format!("{id} h {:.4} -> {:.4} at k={}", w[0].h, w[1].h, w[1].k), &mut counts);
                }
                if w[1].box_edge_mm.is_some() && w[1].median_part_px > w[0].median_part_px {
                    note(1, format!("{id} median part {} -> {} px at k={}", w[0].median_part_px, w[1].median_part_px, w[1].k), &mut counts);
                }
            }
            for r in &t.iterations {
                if r.max_votes_per_part > bound {
                    note(2, format!("{id} {} votes from one part", r.max_votes_per_part), &mut counts);
                }
            }
            for (k, w) in t.inputs.windows(2).enumerate() {
                let grew = w[1].iter().zip(&w[0]).any(|(b, a)| *b && !*a);
                let stray = t.removal_masks[k].iter().zip(&w[0]).any(|(r, a)| *r && !*a);
                if grew || stray {
                    note(3, format!("{id} round {} input is not a subset", k + 1), &mut counts);
                }
            }
        }
    }
    let scenes: usize = evals.iter().map(|e| e.ids.len()).sum();
    let mut detail = format!(
        "{scenes} traces, {rounds} rounds; violations: h {}, part size {}, votes > {bound} {}, subset {}",
        counts[0], counts[1], counts[2], counts[3]
    );
    if !first.is_empty() {
        detail += &format!(" (first: {})", first.join("; "));
    }
    outcome(counts.iter().all(|c| *c == 0), detail)
}

fn occluded_cases(cfg: &Config) -> Vec<ihf::harness::Case> {
    let mut bench = cfg.bench.clone();
    bench.test_count = SCENES;
    cases_from_samples(&generate_test_set(&bench, OCCLUDED_SEED, cfg.exec).unwrap())
}

fn main() -> ExitCode {
    let mut lines: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, o));
    };

    report(1, timed(1.0, blending));
    report(2, timed(5.0, tensor_sum));
    report(3, timed(60.0, sphere_fit));
    report(4, timed(5.0, histograms));

    let mut fixed_cfg = Config::default();
    fixed_cfg.registration.clutter.max_iterations = 5;
    let mesh: Mesh = make_mesh(&fixed_cfg.bench.mesh).unwrap();

    let mut fixed_forest = None;
    report(
        5,
        timed(120.0, || {
            let t = Instant::now();
            let cases = cases_from_samples(&generate_training_set(&fixed_cfg.bench, fixed_cfg.exec).unwrap());
            let set = training_set(&cases, &fixed_cfg).unwrap();
            let featurized = t.elapsed().as_secs_f64();
            let mut params = fixed_cfg.forest.clone();
            params.seed = fixed_cfg.seed;
            let a = train_forest(&set, &params, fixed_cfg.exec).unwrap();
            let b = train_forest(&set, &params, fixed_cfg.exec).unwrap();
            let trained = t.elapsed().as_secs_f64() - featurized;
            let (ba, bb) = (a.to_bytes().unwrap(), b.to_bytes().unwrap());
            let same = ba == bb;
            fixed_forest = Some(a);
            outcome(
                same,
                format!(
                    "{} images, {} parts, {} bytes, identical: {same}; featurize {featurized:.1}s, two trainings {trained:.1}s",
                    cases.len(),
                    set.parts.len(),
                    ba.len()
                ),
            )
        }),
    );
    let fixed_forest = fixed_forest.unwrap();

    report(
        6,
        timed(600.0, || {
            let mut cfg = fixed_cfg.clone();
            cfg.registration.clutter.max_iterations = 0;
            cfg.bench.test_count = 20;
            cfg.bench.occlusion_range = [0.0, 0.0];
            cfg.bench.clutter_probability = 0.0;
            let cases = cases_from_samples(&generate_test_set(&cfg.bench, CLEAN_SEED, cfg.exec).unwrap());
            let depths_ok = cases.iter().all(|c| (700.0..=800.0).contains(&c.pose.translation[2]));
            let e = evaluate(&fixed_forest, &mesh, &cases, &cfg).unwrap();
            let frac = e.fraction_correct_at(0);
            outcome(
                frac >= 0.8 && depths_ok,
                format!("{}/{} correct at z=0.08, mean omega {:.2} mm", count_at(&e, 0), cases.len(), e.mean_omega_at(0)),
            )
        }),
    );

    let cases = occluded_cases(&fixed_cfg);
    let mut fixed_eval = None;
    report(
        7,
        timed(1800.0, || {
            let e = evaluate(&fixed_forest, &mesh, &cases, &fixed_cfg).unwrap();
            let o = iteration_trend(&e, 5);
            fixed_eval = Some(e);
            o
        }),
    );
    let fixed_eval = fixed_eval.unwrap();

    let mut variable_eval = None;
    report(
        8,
        timed(3600.0, || {
            let mut cfg = fixed_cfg.clone();
            cfg.mode = PartMode::Variable;
            let train = cases_from_samples(&generate_training_set(&cfg.bench, cfg.exec).unwrap());
            let forest = ihf::harness::train(&train, &cfg).unwrap();
            let e = evaluate(&forest, &mesh, &cases, &cfg).unwrap();
            let (fv, ff) = (f1_at(&e, 5, 0.08), f1_at(&fixed_eval, 5, 0.08));
            let detail = format!(
                "F1@0.08 variable {fv:.4} vs fixed {ff:.4}; correct at k=5 {} vs {}",
                count_at(&e, 5),
                count_at(&fixed_eval, 5)
            );
            variable_eval = Some(e);
            outcome(fv >= ff - 0.02, detail)
        }),
    );
    let variable_eval = variable_eval.unwrap();

    report(9, timed(1.0, || metric(&fixed_eval.results_at(5))));

    let bound = fixed_forest.params.tree_count * fixed_forest.params.max_leaf_samples;
    report(10, timed(60.0, || {
        let mut o = invariants(&[&fixed_eval, &variable_eval], bound);
        o.passed &= bound == 45;
        o
    }));

    let failed: Vec<usize> = lines.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", lines.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
