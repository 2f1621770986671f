//! Quick built-in checks against independent oracles, run by `ihf selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{Point3, Pose};
use crate::harness::{add_score, cases_from_samples, train, Config};
use crate::hocp::hocp_histogram;
use crate::ibs::{blend, ControlDescriptor, ControlLattice};
use crate::synthbench::{generate_training_set, PoseGrid};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
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

fn blending(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        match blend(rng.gen()) {
            Ok(b) => worst = worst.max((b.iter().sum::<f64>() - 1.0).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    let at_zero = blend(0.0).map(|b| b == [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0]).unwrap_or(false);
    check("blend partition of unity", worst <= 1e-12 && at_zero, format!("max |sum - 1| = {worst:.3e}"))
}

fn tensor_sum(rng: &mut ChaCha8Rng) -> Check {
    let n = 8;
    let Ok(lat) = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect()) else {
        return check("local evaluation = global tensor sum", false, "lattice construction failed".into());
    };
    let d = lat.delta();
    let basis = |c: f64, m: usize| cardinal_cubic(c / d - (m as f64 - 1.0));
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = Point3::new(rng.gen(), rng.gen(), rng.gen());
        let mut f = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    f += lat.get(i, j, k) * basis(x.x, i) * basis(x.y, j) * basis(x.z, k);
                }
            }
        }
        let local = lat.evaluate(&x).unwrap_or(f64::NAN);
        worst = worst.max((local - f).abs());
    }
    check("local evaluation = global tensor sum", worst <= 1e-9, format!("max deviation {worst:.3e}"))
}

fn conservation(rng: &mut ChaCha8Rng) -> Check {
    let descs: Vec<ControlDescriptor> = (0..500)
        .map(|i| ControlDescriptor {
            index: [i % 7 + 1, i % 11 + 1, i % 13 + 1],
            weight: 1.0,
            position: Point3::new(rng.gen(), rng.gen(), rng.gen()),
        })
        .collect();
    match hocp_histogram(&descs, &Point3::new(0.5, 0.5, 0.5), [4, 8, 8], 1.0 / 16.0) {
        Ok(h) => check(
            "histogram conservation",
            h.total() == 500 && h.dimension() == 256,
            format!("total {} dimension {}", h.total(), h.dimension()),
        ),
        Err(e) => check("histogram conservation", false, e.to_string()),
    }
}

fn metric() -> Check {
    let pts: Vec<Point3> = (0..64).map(|i| Point3::new((i % 4) as f64, (i / 4 % 4) as f64, (i / 16) as f64)).collect();
    let gt = Pose::new([0.0, 0.0, 700.0], [0.1, 0.2, 0.3]);
    let moved = Pose::new([3.0, 4.0, 712.0], gt.rotation);
    let same = add_score(&pts, &gt, &gt);
    let shifted = add_score(&pts, &gt, &moved);
    check(
        "pose metric",
        same == 0.0 && (shifted - 13.0).abs() <= 1e-12,
        format!("identical {same}, translated {shifted}"),
    )
}

fn determinism() -> Check {
    let mut cfg = Config::default();
    cfg.bench.grid = PoseGrid {
        yaw_limit_deg: 15.0,
        pitch_limit_deg: 0.0,
        step_deg: 15.0,
    };
    cfg.features.scales = vec![1.0, 1.5];
    cfg.features.fit.resolution = 12;
    cfg.training_stride = 16;
    let run = || -> crate::Result<Vec<u8>> {
        let cases = cases_from_samples(&generate_training_set(&cfg.bench, cfg.exec)?);
        train(&cases, &cfg)?.to_bytes()
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => check("forest determinism", a == b, format!("{} bytes", a.len())),
        (Err(e), _) | (_, Err(e)) => check("forest determinism", false, e.to_string()),
    }
}

pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vec![
        blending(&mut rng),
        tensor_sum(&mut rng),
        conservation(&mut rng),
        metric(),
        determinism(),
    ]
}
