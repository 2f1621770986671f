//! Implicit B-splines over the unit cube.
//!
//! A field `f(x) = sum n_ijk B_i(x) B_j(y) B_k(z)` on an `N x N x N` control
//! lattice of uniform cubic B-splines with knot spacing `1 / (N - 3)`. Only the
//! 4 x 4 x 4 controls around a point are non-zero, which is what makes the
//! representation local and the least-squares fit sparse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Vector3};

const LATTICE_MAGIC: &[u8; 4] = b"IBSL";
const LATTICE_VERSION: u32 = 1;

/// Cubic B-spline blending weights of the four controls spanning a cell.
pub fn blend(u: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::OutOfDomain {
            value: u,
            domain: "[0, 1)",
        });
    }
    Ok(blend_unchecked(u))
}

#[inline]
fn blend_unchecked(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Cell index (0-based, first of the four active controls) and local
/// coordinate for one axis. `x = 1` is clamped into the last cell.
#[inline]
fn cell(x: f64, n: usize) -> (usize, f64) {
    let cells = (n - 3) as f64;
    let t = x * cells;
    let c = t.floor();
    if c >= cells {
        (n - 4, 1.0 - f64::EPSILON / 2.0)
    } else {
        (c as usize, t - c)
    }
}

fn check_point(x: &Point3) -> Result<()> {
    for c in x.iter() {
        if !(0.0..=1.0).contains(c) {
            return Err(Error::OutOfDomain {
                value: *c,
                domain: "[0, 1]^3",
            });
        }
    }
    Ok(())
}

fn check_resolution(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::InvalidParameter(format!("lattice resolution {n} < 4")));
    }
    Ok(())
}

/// Sparse basis vector `e(x)`: the 64 non-zero basis products at `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisVector {
    pub entries: Vec<(usize, f64)>,
}

impl BasisVector {
    pub fn dot(&self, coeffs: &[f64]) -> f64 {
        self.entries.iter().map(|(i, b)| coeffs[*i] * b).sum()
    }
}

pub fn basis_vector(x: &Point3, n: usize) -> Result<BasisVector> {
    check_resolution(n)?;
    check_point(x)?;
    Ok(basis_unchecked(x, n))
}

fn basis_unchecked(x: &Point3, n: usize) -> BasisVector {
    let (ci, u) = cell(x.x, n);
    let (cj, v) = cell(x.y, n);
    let (ck, w) = cell(x.z, n);
    let (bu, bv, bw) = (blend_unchecked(u), blend_unchecked(v), blend_unchecked(w));
    let mut entries = Vec::with_capacity(64);
    for l in 0..4 {
        for m in 0..4 {
            let bl = bu[l] * bv[m];
            let row = ((ci + l) * n + cj + m) * n + ck;
            for p in 0..4 {
                entries.push((row + p, bl * bw[p]));
            }
        }
    }
    BasisVector { entries }
}

/// Coefficients of an implicit B-spline, stored `i`-major (`(i * N + j) * N + k`,
/// 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlLattice {
    n: usize,
    coeffs: Vec<f64>,
}

impl ControlLattice {
    pub fn zeros(n: usize) -> Result<Self> {
        Self::from_coeffs(n, vec![0.0; n * n * n])
    }

    pub fn from_coeffs(n: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_resolution(n)?;
        if coeffs.len() != n * n * n {
            return Err(Error::InvalidParameter(format!(
                "{} coefficients for an N = {n} lattice",
                coeffs.len()
            )));
        }
        Ok(Self { n, coeffs })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        1.0 / (self.n - 3) as f64
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.coeffs[self.flat_index(i, j, k)]
    }

    /// Unit-cube location of the 0-based vertex `(i, j, k)`; the 1-based
    /// vertex `m` sits at `(m - 2) * delta`.
    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Point3 {
        let d = self.delta();
        Point3::new(
            (i as f64 - 1.0) * d,
            (j as f64 - 1.0) * d,
            (k as f64 - 1.0) * d,
        )
    }

    /// Local evaluation over the 64 controls of the cell containing `x`.
    pub fn evaluate(&self, x: &Point3) -> Result<f64> {
        check_point(x)?;
        Ok(self.evaluate_unchecked(x))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &Point3) -> f64 {
        let n = self.n;
        let (ci, u) = cell(x.x, n);
        let (cj, v) = cell(x.y, n);
        let (ck, w) = cell(x.z, n);
        let (bu, bv, bw) = (blend_unchecked(u), blend_unchecked(v), blend_unchecked(w));
        let mut f = 0.0;
        for l in 0..4 {
            for m in 0..4 {
                let base = ((ci + l) * n + cj + m) * n + ck;
                let c = &self.coeffs[base..base + 4];
                f += bu[l] * bv[m] * (c[0] * bw[0] + c[1] * bw[1] + c[2] * bw[2] + c[3] * bw[3]);
            }
        }
        f
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControlLattice, b: f64) -> Result<ControlLattice> {
        if self.n != other.n {
            return Err(Error::InvalidParameter("lattice resolutions differ".into()));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(x, y)| a * x + b * y)
            .collect();
        ControlLattice::from_coeffs(self.n, coeffs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.coeffs.len() * 8);
        out.extend_from_slice(LATTICE_MAGIC);
        out.extend_from_slice(&LATTICE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for c in &self.coeffs {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != LATTICE_MAGIC {
            return Err(Error::CorruptModel("not a lattice file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != LATTICE_VERSION {
            return Err(Error::CorruptModel(format!("lattice version {version}")));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if n < 4 || body.len() != n * n * n * 8 {
            return Err(Error::CorruptModel(format!(
                "lattice body of {} bytes for N = {n}",
                body.len()
            )));
        }
        let coeffs = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ControlLattice::from_coeffs(n, coeffs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A lattice vertex viewed as a shape descriptor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlDescriptor {
    /// 1-based lattice index.
    pub index: [usize; 3],
    pub weight: f64,
    pub position: Point3,
}

/// Every vertex with `|weight| > threshold`; `None` keeps all of them.
pub fn control_descriptors(lattice: &ControlLattice, threshold: Option<f64>) -> Vec<ControlDescriptor> {
    let n = lattice.n;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let weight = lattice.get(i, j, k);
                if threshold.is_some_and(|t| weight.abs() <= t) {
                    continue;
                }
                out.push(ControlDescriptor {
                    index: [i + 1, j + 1, k + 1],
                    weight,
                    position: lattice.vertex_position(i, j, k),
                });
            }
        }
    }
    out
}

/// Settings of the three-level least-squares fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    pub resolution: usize,
    /// Offset of the two outer level sets along the normals; `None` means
    /// half a knot interval.
    pub epsilon: Option<f64>,
    /// Ridge weight on the coefficients.
    pub lambda: f64,
    /// Weight of the membrane term `sum (n_a - n_b)^2` over lattice
    /// neighbours; carries the inside/outside sign away from the data.
    pub smoothness: f64,
    /// Surface samples used at most (evenly strided); `None` uses all.
    pub max_points: Option<usize>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            resolution: 24,
            epsilon: None,
            lambda: 1e-6,
            smoothness: 1e-2,
            max_points: None,
            tolerance: 1e-8,
            max_iterations: 4000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub lattice: ControlLattice,
    /// RMS of `f` over the surface samples.
    pub surface_rms: f64,
    /// RMS residual over all three level sets.
    pub residual_rms: f64,
    pub iterations: usize,
    pub equations: usize,
}

/// Fits an implicit B-spline whose zero set passes through `points`, with the
/// copies shifted by `+epsilon` along the normals targeting `+1` and by
/// `-epsilon` targeting `-1`. Solves the regularized normal equations with
/// Jacobi-preconditioned conjugate gradients starting from zero, which makes
/// the result a deterministic function of the inputs.
pub fn fit_3l(points: &[Point3], normals: &[Vector3], params: &FitParams) -> Result<FitOutcome> {
    let n = params.resolution;
    check_resolution(n)?;
    if points.is_empty() {
        return Err(Error::EmptyCloud("nothing to fit"));
    }
    if normals.len() != points.len() {
        return Err(Error::InvalidParameter("one normal per point required".into()));
    }
    let delta = 1.0 / (n - 3) as f64;
    let eps = params.epsilon.unwrap_or(delta / 2.0);
    if !(eps > 0.0 && eps < delta) {
        return Err(Error::InvalidParameter(format!(
            "epsilon {eps} must lie in (0, delta = {delta})"
        )));
    }
    if !(params.lambda >= 0.0 && params.smoothness >= 0.0) {
        return Err(Error::InvalidParameter("lambda and smoothness must be >= 0".into()));
    }
    let unknowns = n * n * n;

    let stride = params
        .max_points
        .filter(|m| *m > 0 && points.len() > *m)
        .map_or(1, |m| points.len().div_ceil(m));

    let mut rows: Vec<BasisVector> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut surface_rows = 0;
    for (p, nrm) in points.iter().zip(normals).step_by(stride) {
        check_point(p)?;
        rows.push(basis_unchecked(p, n));
        targets.push(0.0);
        surface_rows += 1;
        for (sign, target) in [(1.0, 1.0), (-1.0, -1.0)] {
            let q = p + nrm * (sign * eps);
            if q.iter().all(|c| (0.0..=1.0).contains(c)) {
                rows.push(basis_unchecked(&q, n));
                targets.push(target);
            }
        }
    }
    if params.lambda == 0.0 && rows.len() < unknowns {
        return Err(Error::Underdetermined {
            rows: rows.len(),
            unknowns,
        });
    }

    let system = NormalSystem {
        n,
        rows: &rows,
        lambda: params.lambda,
        smoothness: params.smoothness,
    };
    let mut rhs = vec![0.0; unknowns];
    for (row, t) in rows.iter().zip(&targets) {
        if *t != 0.0 {
            for (i, b) in &row.entries {
                rhs[*i] += b * t;
            }
        }
    }
    let (coeffs, iterations) = system.solve(&rhs, params.tolerance, params.max_iterations);
    let lattice = ControlLattice::from_coeffs(n, coeffs)?;

    let mut all = 0.0;
    let mut surf = 0.0;
    let mut k = 0;
    for (row, t) in rows.iter().zip(&targets) {
        let r = row.dot(lattice.coeffs()) - t;
        all += r * r;
        if *t == 0.0 {
            surf += r * r;
            k += 1;
        }
    }
    debug_assert_eq!(k, surface_rows);
    Ok(FitOutcome {
        lattice,
        surface_rms: (surf / surface_rows as f64).sqrt(),
        residual_rms: (all / rows.len() as f64).sqrt(),
        iterations,
        equations: rows.len(),
    })
}

/// `(A^T A + lambda I + smoothness G) x = b`, with `G` the 6-neighbour graph
/// Laplacian of the lattice.
struct NormalSystem<'a> {
    n: usize,
    rows: &'a [BasisVector],
    lambda: f64,
    smoothness: f64,
}

impl NormalSystem<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.lambda * xi;
        }
        for row in self.rows {
            let r = row.dot(x);
            if r != 0.0 {
                for (i, b) in &row.entries {
                    out[*i] += b * r;
                }
            }
        }
        if self.smoothness > 0.0 {
            let mu = self.smoothness;
            let strides = [n * n, n, 1];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let idx = (i * n + j) * n + k;
                        let coord = [i, j, k];
                        let mut acc = 0.0;
                        for a in 0..3 {
                            if coord[a] > 0 {
                                acc += x[idx] - x[idx - strides[a]];
                            }
                            if coord[a] + 1 < n {
                                acc += x[idx] - x[idx + strides[a]];
                            }
                        }
                        out[idx] += mu * acc;
                    }
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![self.lambda; n * n * n];
        for row in self.rows {
            for (i, b) in &row.entries {
                d[*i] += b * b;
            }
        }
        if self.smoothness > 0.0 {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let degree = [i, j, k]
                            .iter()
                            .map(|c| (*c > 0) as usize + (*c + 1 < n) as usize)
                            .sum::<usize>();
                        d[(i * n + j) * n + k] += self.smoothness * degree as f64;
                    }
                }
            }
        }
        d
    }

    fn solve(&self, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
        let len = b.len();
        let diag = self.diagonal();
        let inv: Vec<f64> = diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let mut x = vec![0.0; len];
        let mut r = b.to_vec();
        let b_norm = dot(b, b).sqrt();
        if b_norm == 0.0 {
            return (x, 0);
        }
        let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, m)| a * m).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; len];
        let mut rz = dot(&r, &z);
        for it in 0..max_iter {
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return (x, it);
            }
            let step = rz / pap;
            for i in 0..len {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            if dot(&r, &r).sqrt() <= tol * b_norm {
                return (x, it + 1);
            }
            for i in 0..len {
                z[i] = r[i] * inv[i];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..len {
                p[i] = z[i] + beta * p[i];
            }
        }
        (x, max_iter)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blend_endpoint_and_midpoint() {
        let b = blend(0.0).unwrap();
        assert_eq!(b, [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0]);
        // (1/48, 23/48, 23/48, 1/48), worked out by hand from the cubic
        // polynomials at u = 1/2.
        let m = blend(0.5).unwrap();
        for (got, want) in m.iter().zip([1.0, 23.0, 23.0, 1.0]) {
            assert_abs_diff_eq!(*got, want / 48.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(blend(0.37).unwrap().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn blend_rejects_out_of_domain() {
        assert!(blend(1.0).is_err());
        assert!(blend(-1e-9).is_err());
        assert!(blend(f64::NAN).is_err());
    }

    #[test]
    fn partition_of_unity_over_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let worst = (0..10_000)
            .map(|_| {
                let b = blend(rng.gen::<f64>()).unwrap();
                assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
                (b.iter().sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12);
    }

    #[test]
    fn first_cell_indices() {
        let e = basis_vector(&Point3::origin(), 10).unwrap();
        assert_eq!(e.entries.len(), 64);
        for (idx, _) in &e.entries {
            let (i, j, k) = (idx / 100, (idx / 10) % 10, idx % 10);
            // 0-based 0..=3 is 1-based 1..=4
            assert!(i <= 3 && j <= 3 && k <= 3);
        }
        assert_abs_diff_eq!(e.entries.iter().map(|(_, b)| b).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(basis_vector(&Point3::origin(), 3).is_err());
    }

    #[test]
    fn boundary_point_clamps_to_last_cell() {
        let n = 8;
        let e = basis_vector(&Point3::new(1.0, 1.0, 1.0), n).unwrap();
        assert!(e.entries.iter().all(|(i, _)| *i < n * n * n));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen()).collect()).unwrap();
        let at_one = lat.evaluate(&Point3::new(1.0, 0.5, 0.5)).unwrap();
        let near = lat.evaluate(&Point3::new(1.0 - 1e-12, 0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(at_one, near, epsilon = 1e-9);
        assert!(lat.evaluate(&Point3::new(1.0 + 1e-9, 0.5, 0.5)).is_err());
    }

    #[test]
    fn constant_lattices() {
        let zero = ControlLattice::zeros(6).unwrap();
        let c = ControlLattice::from_coeffs(6, vec![2.5; 216]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Point3::new(rng.gen(), rng.gen(), rng.gen());
            assert_eq!(zero.evaluate(&x).unwrap(), 0.0);
            assert_abs_diff_eq!(c.evaluate(&x).unwrap(), 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn basis_dot_matches_evaluate() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for _ in 0..200 {
            let x = Point3::new(rng.gen(), rng.gen(), rng.gen());
            let e = basis_vector(&x, n).unwrap();
            assert_abs_diff_eq!(e.dot(lat.coeffs()), lat.evaluate(&x).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn descriptors_by_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let small = ControlLattice::from_coeffs(4, (0..64).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        assert_eq!(control_descriptors(&small, Some(0.0)).len(), 64);
        assert_eq!(control_descriptors(&small, None).len(), 64);
        let d = control_descriptors(&small, None)[0];
        assert_eq!(d.index, [1, 1, 1]);
        assert_eq!(d.position, Point3::new(-1.0, -1.0, -1.0));

        let zero = ControlLattice::zeros(5).unwrap();
        assert!(control_descriptors(&zero, Some(1e-9)).is_empty());

        let n = 9;
        let lat = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut mags: Vec<f64> = lat.coeffs().iter().map(|c| c.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let median = mags[mags.len() / 2];
        let count = mags.iter().filter(|m| **m > median).count();
        assert_eq!(control_descriptors(&lat, Some(median)).len(), count);
        assert!((count as i64 - (n * n * n) as i64 / 2).abs() <= 1);
    }

    #[test]
    fn lattice_bytes_round_trip_and_reject_garbage() {
        let lat = ControlLattice::from_coeffs(4, (0..64).map(|i| i as f64 * 0.25 - 3.0).collect()).unwrap();
        let bytes = lat.to_bytes();
        let back = ControlLattice::from_bytes(&bytes).unwrap();
        assert_eq!(back, lat);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ControlLattice::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ControlLattice::from_bytes(&wrong).is_err());
    }

    fn plane_samples(step: usize) -> (Vec<Point3>, Vec<Vector3>) {
        let mut pts = Vec::new();
        for a in 0..=step {
            for b in 0..=step {
                pts.push(Point3::new(a as f64 / step as f64, b as f64 / step as f64, 0.5));
            }
        }
        let normals = vec![Vector3::new(0.0, 0.0, -1.0); pts.len()];
        (pts, normals)
    }

    #[test]
    fn plane_fit_flips_sign_across_plane() {
        let (pts, normals) = plane_samples(30);
        let params = FitParams {
            resolution: 12,
            ..FitParams::default()
        };
        let fit = fit_3l(&pts, &normals, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut sq = 0.0;
        for _ in 0..500 {
            let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
            sq += fit.lattice.evaluate(&Point3::new(x, y, 0.5)).unwrap().powi(2);
            // normals point to -z, the +1 side
            assert!(fit.lattice.evaluate(&Point3::new(x, y, 0.4)).unwrap() > 0.0);
            assert!(fit.lattice.evaluate(&Point3::new(x, y, 0.6)).unwrap() < 0.0);
        }
        assert!((sq / 500.0).sqrt() <= 0.1);
    }

    #[test]
    fn ridge_weight_never_lowers_the_residual() {
        let (pts, normals) = plane_samples(14);
        let mut last = 0.0;
        for lambda in [1e-6, 1e-3, 1e-1, 1.0, 10.0] {
            let params = FitParams {
                resolution: 8,
                lambda,
                smoothness: 1e-2,
                tolerance: 1e-12,
                max_iterations: 20_000,
                ..FitParams::default()
            };
            let fit = fit_3l(&pts, &normals, &params).unwrap();
            assert!(fit.residual_rms >= last - 1e-9, "lambda {lambda}: {} < {last}", fit.residual_rms);
            last = fit.residual_rms;
        }
    }

    #[test]
    fn zero_lambda_underdetermined_is_rejected() {
        let pts = vec![Point3::new(0.5, 0.5, 0.5)];
        let normals = vec![Vector3::new(0.0, 0.0, -1.0)];
        let params = FitParams {
            resolution: 10,
            lambda: 0.0,
            ..FitParams::default()
        };
        let err = fit_3l(&pts, &normals, &params).unwrap_err();
        assert!(err.to_string().contains("lambda > 0"));
    }

    #[test]
    fn epsilon_must_stay_inside_a_cell() {
        let (pts, normals) = plane_samples(4);
        let params = FitParams {
            resolution: 8,
            epsilon: Some(0.5),
            ..FitParams::default()
        };
        assert!(fit_3l(&pts, &normals, &params).is_err());
    }

    proptest! {
        #[test]
        fn evaluation_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
                                x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0) {
            let n = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l1 = ControlLattice::from_coeffs(n, (0..216).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let l2 = ControlLattice::from_coeffs(n, (0..216).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let p = Point3::new(x, y, z);
            let lhs = l1.combine(a, &l2, b).unwrap().evaluate(&p).unwrap();
            let rhs = a * l1.evaluate(&p).unwrap() + b * l2.evaluate(&p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn no_jump_across_cell_seams(seed in any::<u64>(), cell_i in 1usize..6, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let n = 9;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lat = ControlLattice::from_coeffs(n, (0..n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let seam = cell_i as f64 / (n - 3) as f64;
            let step = 1e-6;
            let lo = lat.evaluate(&Point3::new(seam - step / 2.0, y, z)).unwrap();
            let hi = lat.evaluate(&Point3::new(seam + step / 2.0, y, z)).unwrap();
            // |grad f| <= sum|n| * max|b'| / delta, generously bounded.
            let bound = 2.0 * (n - 3) as f64 * step;
            prop_assert!((hi - lo).abs() <= bound);
        }
    }
}
