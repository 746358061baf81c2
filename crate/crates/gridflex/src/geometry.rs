//! Polytope construction, support functions, volumes, and aggregate ranges.
//!
//! The coordinated cohort's published envelope is the residual polytope:
//! the network rows restricted to the coordinated columns after subtracting
//! the worst-case non-coordinated contributions. Volumes are estimated by
//! rejection sampling from the tight bounding box in low dimension and by
//! ball-annealed hit-and-run above that; both are deterministic given a seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conic::{solve_lp, ConicError, ConicSettings};
use crate::solver::{residual_offsets_pu, DesignProblem, EnvelopeSolution};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("polytope is empty")]
    Empty,
    #[error("polytope is unbounded along axis {0}")]
    Unbounded(usize),
    #[error("lp kernel failure: {0}")]
    Lp(#[from] ConicError),
    #[error("invalid argument: {0}")]
    BadArgs(String),
}

/// Half-space polytope `F x <= g`.
#[derive(Debug, Clone)]
pub struct Polytope {
    facets: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl Polytope {
    pub fn new(facets: DMatrix<f64>, offsets: DVector<f64>) -> Self {
        assert_eq!(facets.nrows(), offsets.len());
        Polytope { facets, offsets }
    }

    pub fn dim(&self) -> usize {
        self.facets.ncols()
    }

    pub fn facets(&self) -> &DMatrix<f64> {
        &self.facets
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let slack = &self.offsets - &self.facets * x;
        slack.iter().all(|s| *s >= -tol)
    }

    /// Axis-aligned box `[lo, hi]` as 2n half-spaces.
    pub fn from_box(bounds: &[(f64, f64)]) -> Self {
        let n = bounds.len();
        let mut facets = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            facets[(2 * i, i)] = 1.0;
            offsets[2 * i] = hi;
            facets[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -lo;
        }
        Polytope { facets, offsets }
    }
}

/// The coordinated cohort's published envelope in kW coordinates:
/// `A_M p <= b_res` with `b_res = b_q(at the optimal setpoints, robustly
/// tightened) - sum of worst-case non-coordinated contributions`.
pub fn residual_polytope(
    dp: &DesignProblem,
    sol: &EnvelopeSolution,
) -> Result<Polytope, GeometryError> {
    let nm = sol.coordinated.len();
    let base = dp.feeder.base_kva();
    let offsets_pu = residual_offsets_pu(dp, sol);
    let customers = dp.feeder.customers();

    let mut rows = Vec::new();
    for row in 0..dp.cs.rows() {
        let coeffs: Vec<f64> = sol
            .coordinated
            .iter()
            .map(|&c| dp.cs.a()[(row, customers[c].node)])
            .collect();
        let scale = offsets_pu[row].abs().max(1.0);
        if offsets_pu[row] < -1e-6 * scale {
            // The design constraints force b_res >= 0 up to solver
            // tolerance; a real negative signals an inconsistent solution.
            return Err(GeometryError::Empty);
        }
        if coeffs.iter().all(|&v| v == 0.0) {
            continue;
        }
        // Clamp tolerance-level negatives so the origin stays published.
        rows.push((coeffs, offsets_pu[row].max(0.0) * base));
    }
    let facets = DMatrix::from_fn(rows.len(), nm, |i, j| rows[i].0[j]);
    let offsets = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let poly = Polytope::new(facets, offsets);
    if nm > 0 {
        // Sanity: the design guarantees the origin stays published.
        if !poly.contains(&DVector::zeros(nm), 1e-6) {
            return Err(GeometryError::Empty);
        }
    }
    Ok(poly)
}

/// Support interval of the ellipsoid `{W u + c : ||u|| <= 1}` along `d`:
/// `d.c -/+ ||W^T d||`.
pub fn ellipsoid_support(w: &DMatrix<f64>, center: &DVector<f64>, d: &DVector<f64>) -> (f64, f64) {
    let reach = (w.transpose() * d).norm();
    let mid = center.dot(d);
    (mid - reach, mid + reach)
}

/// Center and radius of the largest inscribed ball, by LP.
pub fn chebyshev_center(poly: &Polytope) -> Result<(DVector<f64>, f64), GeometryError> {
    let n = poly.dim();
    let rows = poly.facets.nrows();
    // Variables (x, r): maximize r s.t. F x + ||F_i|| r <= g, r >= 0.
    let mut g = DMatrix::zeros(rows + 1, n + 1);
    let mut h = DVector::zeros(rows + 1);
    for i in 0..rows {
        for j in 0..n {
            g[(i, j)] = poly.facets[(i, j)];
        }
        g[(i, n)] = poly.facets.row(i).norm();
        h[i] = poly.offsets[i];
    }
    g[(rows, n)] = -1.0;
    h[rows] = 0.0;
    let mut c = DVector::zeros(n + 1);
    c[n] = -1.0;
    let sol = match solve_lp(&c, &g, &h, None, &ConicSettings::default()) {
        Ok(s) => s,
        Err(ConicError::Infeasible) => return Err(GeometryError::Empty),
        Err(ConicError::Unbounded) => return Err(GeometryError::Unbounded(0)),
        Err(e) => return Err(GeometryError::Lp(e)),
    };
    let center = DVector::from_fn(n, |i, _| sol.x[i]);
    Ok((center, sol.x[n]))
}

/// Tight axis-aligned bounding box via 2n LPs.
pub fn bounding_box(poly: &Polytope) -> Result<Vec<(f64, f64)>, GeometryError> {
    let n = poly.dim();
    let mut bounds = Vec::with_capacity(n);
    for axis in 0..n {
        let mut c = DVector::zeros(n);
        c[axis] = 1.0;
        let lo = match solve_lp(
            &c,
            &poly.facets,
            &poly.offsets,
            None,
            &ConicSettings::default(),
        ) {
            Ok(s) => s.objective,
            Err(ConicError::Unbounded) => return Err(GeometryError::Unbounded(axis)),
            Err(ConicError::Infeasible) => return Err(GeometryError::Empty),
            Err(e) => return Err(GeometryError::Lp(e)),
        };
        c[axis] = -1.0;
        let hi = match solve_lp(
            &c,
            &poly.facets,
            &poly.offsets,
            None,
            &ConicSettings::default(),
        ) {
            Ok(s) => -s.objective,
            Err(ConicError::Unbounded) => return Err(GeometryError::Unbounded(axis)),
            Err(ConicError::Infeasible) => return Err(GeometryError::Empty),
            Err(e) => return Err(GeometryError::Lp(e)),
        };
        bounds.push((lo, hi));
    }
    Ok(bounds)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Estimate the polytope volume. Dimensions up to 6 use rejection sampling
/// from the tight bounding box (unbiased); higher dimensions use hit-and-run
/// over a nested sequence of ball intersections with thinning `10 n`.
/// Deterministic for a fixed seed.
pub fn volume_estimate(
    poly: &Polytope,
    sample_budget: usize,
    seed: u64,
) -> Result<VolumeEstimate, GeometryError> {
    let n = poly.dim();
    if n == 0 {
        return Err(GeometryError::BadArgs("zero-dimensional polytope".into()));
    }
    if sample_budget == 0 {
        return Err(GeometryError::BadArgs("zero sample budget".into()));
    }
    let bounds = bounding_box(poly)?;
    let box_vol: f64 = bounds.iter().map(|(lo, hi)| (hi - lo).max(0.0)).product();
    if box_vol <= 0.0 {
        return Ok(VolumeEstimate {
            volume: 0.0,
            stderr: 0.0,
            samples: 0,
        });
    }
    if n <= 6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        let mut point = DVector::zeros(n);
        for _ in 0..sample_budget {
            for (i, &(lo, hi)) in bounds.iter().enumerate() {
                point[i] = rng.gen_range(lo..=hi);
            }
            if poly.contains(&point, 0.0) {
                hits += 1;
            }
        }
        let frac = hits as f64 / sample_budget as f64;
        let stderr = box_vol * (frac * (1.0 - frac) / sample_budget as f64).sqrt();
        Ok(VolumeEstimate {
            volume: frac * box_vol,
            stderr,
            samples: sample_budget,
        })
    } else {
        hit_and_run_volume(poly, &bounds, sample_budget, seed)
    }
}

/// Multi-phase annealing: with `K_i = P intersect Ball(x0, r0 2^(i/n))`,
/// `vol(P) = vol(Ball(r0)) * prod vol(K_{i+1})/vol(K_i)`; each ratio is at
/// most 2 by convexity and is estimated by uniform hit-and-run samples of
/// `K_{i+1}` counted against `K_i`.
fn hit_and_run_volume(
    poly: &Polytope,
    bounds: &[(f64, f64)],
    sample_budget: usize,
    seed: u64,
) -> Result<VolumeEstimate, GeometryError> {
    let n = poly.dim();
    let (center, r0) = chebyshev_center(poly)?;
    if r0 <= 0.0 {
        return Ok(VolumeEstimate {
            volume: 0.0,
            stderr: 0.0,
            samples: 0,
        });
    }
    // Enclosing ball radius around the Chebyshev center.
    let r_out = bounds
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| (center[i] - lo).abs().max((hi - center[i]).abs()).powi(2))
        .sum::<f64>()
        .sqrt();

    let phases = ((n as f64) * (r_out / r0).log2()).ceil().max(1.0) as usize;
    let radii: Vec<f64> = (0..=phases)
        .map(|i| (r0 * 2f64.powf(i as f64 / n as f64)).min(r_out))
        .collect();
    let per_phase = (sample_budget / phases).max(64);
    let thin = 10 * n;

    // Unit n-ball volume.
    let mut unit_ball = std::f64::consts::PI.powf(n as f64 / 2.0);
    unit_ball /= gamma_half_integer(n as f64 / 2.0 + 1.0);
    let mut volume = unit_ball * r0.powi(n as i32);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rel_var = 0.0;
    let mut x = center.clone();
    let mut total_samples = 0usize;
    for i in 0..phases {
        let (r_small, r_big) = (radii[i], radii[i + 1]);
        let mut inside = 0usize;
        for _ in 0..per_phase {
            for _ in 0..thin {
                hit_and_run_step(poly, &center, r_big, &mut x, &mut rng);
            }
            if (&x - &center).norm() <= r_small {
                inside += 1;
            }
            total_samples += 1;
        }
        let frac = (inside as f64 / per_phase as f64).max(1.0 / per_phase as f64);
        volume /= frac;
        rel_var += (1.0 - frac) / (frac * per_phase as f64);
    }
    Ok(VolumeEstimate {
        volume,
        stderr: volume * rel_var.sqrt(),
        samples: total_samples,
    })
}

/// One hit-and-run move inside `P intersect Ball(center, r)`.
fn hit_and_run_step(
    poly: &Polytope,
    center: &DVector<f64>,
    r: f64,
    x: &mut DVector<f64>,
    rng: &mut ChaCha8Rng,
) {
    let n = poly.dim();
    // Random direction from a spherical Gaussian.
    let mut d = DVector::zeros(n);
    for i in 0..n {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        d[i] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let norm = d.norm();
    if norm == 0.0 {
        return;
    }
    d /= norm;

    // Chord within the polytope.
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    let fd = &poly.facets * &d;
    let slack = &poly.offsets - &poly.facets * &*x;
    for i in 0..poly.facets.nrows() {
        if fd[i] > 1e-300 {
            t_hi = t_hi.min(slack[i] / fd[i]);
        } else if fd[i] < -1e-300 {
            t_lo = t_lo.max(slack[i] / fd[i]);
        }
    }
    // Chord within the ball: |x + t d - center|^2 = r^2.
    let offset = &*x - center;
    let b = offset.dot(&d);
    let c = offset.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return;
    }
    t_lo = t_lo.max(-b - disc.sqrt());
    t_hi = t_hi.min(-b + disc.sqrt());
    if t_hi <= t_lo {
        return;
    }
    let t = rng.gen_range(t_lo..=t_hi);
    *x += d * t;
}

fn gamma_half_integer(z: f64) -> f64 {
    // z is a positive multiple of 1/2; recurse down to Gamma(1) or Gamma(1/2).
    if (z - 1.0).abs() < 1e-12 {
        1.0
    } else if (z - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else {
        (z - 1.0) * gamma_half_integer(z - 1.0)
    }
}

/// Extremes of the aggregate injection `sum_j p_j` over the joint envelope:
/// LPs over the coordinated polytope plus the analytic box contribution.
pub fn aggregate_range(
    poly: Option<&Polytope>,
    boxes: &[(f64, f64)],
) -> Result<(f64, f64), GeometryError> {
    let mut lo: f64 = boxes.iter().map(|b| b.0).sum();
    let mut hi: f64 = boxes.iter().map(|b| b.1).sum();
    if let Some(poly) = poly {
        if poly.dim() > 0 {
            let ones = DVector::from_element(poly.dim(), 1.0);
            let min = match solve_lp(
                &ones,
                &poly.facets,
                &poly.offsets,
                None,
                &ConicSettings::default(),
            ) {
                Ok(s) => s.objective,
                Err(ConicError::Unbounded) => return Err(GeometryError::Unbounded(0)),
                Err(ConicError::Infeasible) => return Err(GeometryError::Empty),
                Err(e) => return Err(GeometryError::Lp(e)),
            };
            let max = match solve_lp(
                &(-&ones),
                &poly.facets,
                &poly.offsets,
                None,
                &ConicSettings::default(),
            ) {
                Ok(s) => -s.objective,
                Err(ConicError::Unbounded) => return Err(GeometryError::Unbounded(0)),
                Err(ConicError::Infeasible) => return Err(GeometryError::Empty),
                Err(e) => return Err(GeometryError::Lp(e)),
            };
            lo += min;
            hi += max;
        }
    }
    Ok((lo, hi))
}

/// Geometric-mean envelope size `(vol_M * vol_N)^(1/n_act)`, a kW-scale
/// summary comparable across cases.
pub fn geometric_mean_size(vol_m: f64, vol_n: f64, n_act: usize) -> Result<f64, GeometryError> {
    if n_act == 0 {
        return Err(GeometryError::BadArgs(
            "no active participants (n_act = 0)".into(),
        ));
    }
    if vol_m < 0.0 || vol_n < 0.0 {
        return Err(GeometryError::BadArgs("negative volume".into()));
    }
    Ok((vol_m * vol_n).powf(1.0 / n_act as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square() -> Polytope {
        Polytope::from_box(&[(0.0, 1.0), (0.0, 1.0)])
    }

    #[test]
    fn support_of_unit_ball_3d() {
        let w = DMatrix::identity(3, 3);
        let c = DVector::zeros(3);
        let d = DVector::from_element(3, 1.0);
        let (lo, hi) = ellipsoid_support(&w, &c, &d);
        assert_abs_diff_eq!(hi, 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(lo, -(3f64.sqrt()), epsilon = 1e-12);
    }

    #[test]
    fn support_matches_boundary_sampling() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let d = DVector::from_vec(vec![1.0, 0.0]);
        let (lo, hi) = ellipsoid_support(&w, &c, &d);
        assert_abs_diff_eq!(lo, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 3.0, epsilon = 1e-12);
        // Oracle: maximize over densely sampled boundary points W u + c.
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for k in 0..10_000 {
            let t = 2.0 * std::f64::consts::PI * k as f64 / 10_000.0;
            let u = DVector::from_vec(vec![t.cos(), t.sin()]);
            let p = &w * u + &c;
            best = best.max(p.dot(&d));
            worst = worst.min(p.dot(&d));
        }
        assert_abs_diff_eq!(best, hi, epsilon = 1e-6);
        assert_abs_diff_eq!(worst, lo, epsilon = 1e-6);
    }

    #[test]
    fn support_symmetry_property() {
        let w = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let c = DVector::from_vec(vec![0.4, -0.2]);
        for d in [
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![-0.5, 0.1]),
        ] {
            let (lo, hi) = ellipsoid_support(&w, &c, &d);
            let reach = (w.transpose() * &d).norm();
            assert_abs_diff_eq!(hi - lo, 2.0 * reach, epsilon = 1e-12);
        }
    }

    #[test]
    fn chebyshev_of_unit_square() {
        let (center, radius) = chebyshev_center(&unit_square()).unwrap();
        assert_abs_diff_eq!(center[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(center[1], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(radius, 0.5, epsilon = 1e-8);
    }

    #[test]
    fn chebyshev_of_simplex() {
        // x, y >= 0, x + y <= 1: inradius 1 / (2 + sqrt 2).
        let facets = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let offsets = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let (_, radius) = chebyshev_center(&Polytope::new(facets, offsets)).unwrap();
        assert_abs_diff_eq!(radius, 1.0 / (2.0 + 2f64.sqrt()), epsilon = 1e-8);
    }

    #[test]
    fn chebyshev_of_empty_system() {
        let facets = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let offsets = DVector::from_vec(vec![-1.0, -1.0]);
        assert!(matches!(
            chebyshev_center(&Polytope::new(facets, offsets)),
            Err(GeometryError::Empty)
        ));
    }

    #[test]
    fn volume_of_unit_cube() {
        let cube = Polytope::from_box(&[(0.0, 1.0); 3]);
        let est = volume_estimate(&cube, 20_000, 7).unwrap();
        assert_abs_diff_eq!(est.volume, 1.0, epsilon = 0.05);
    }

    #[test]
    fn volume_of_half_square() {
        // Unit square cut by x + y <= 1.
        let facets =
            DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let offsets = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0]);
        let est = volume_estimate(&Polytope::new(facets, offsets), 40_000, 3).unwrap();
        assert_abs_diff_eq!(est.volume, 0.5, epsilon = 0.025);
    }

    #[test]
    fn volume_of_faceted_ball() {
        // 64-facet inner approximation of the unit disc rotated into 3D:
        // approximate the unit ball by rho = 64 polygonal facets per axis
        // pair is overkill; instead use the classic octahedron-free check:
        // random facet directions on the sphere at offset 1.
        let rho = 64usize;
        let mut dirs = Vec::new();
        // Deterministic quasi-uniform sphere covering via Fibonacci lattice.
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        for k in 0..(2 * rho) {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / (2.0 * rho as f64);
            let r = (1.0 - z * z).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (k as f64 / golden).fract();
            dirs.push([r * phi.cos(), r * phi.sin(), z]);
        }
        let facets = DMatrix::from_fn(dirs.len(), 3, |i, j| dirs[i][j]);
        let offsets = DVector::from_element(dirs.len(), 1.0);
        let est = volume_estimate(&Polytope::new(facets, offsets), 60_000, 11).unwrap();
        let ball = 4.0 * std::f64::consts::PI / 3.0;
        assert!(
            (est.volume - ball).abs() / ball < 0.07,
            "volume {} vs {}",
            est.volume,
            ball
        );
    }

    #[test]
    fn volume_hit_and_run_high_dimension() {
        // 7-dimensional box forces the annealing path: volume 2^7 = 128.
        let cube = Polytope::from_box(&[(-1.0, 1.0); 7]);
        let est = volume_estimate(&cube, 30_000, 5).unwrap();
        assert!(
            (est.volume - 128.0).abs() / 128.0 < 0.25,
            "est {} stderr {}",
            est.volume,
            est.stderr
        );
    }

    #[test]
    fn stderr_shrinks_with_budget() {
        let cube = Polytope::from_box(&[(0.0, 1.0); 2]);
        // Cut a corner so the hit fraction is informative.
        let mut facets = DMatrix::zeros(5, 2);
        facets.view_mut((0, 0), (4, 2)).copy_from(cube.facets());
        facets[(4, 0)] = 1.0;
        facets[(4, 1)] = 1.0;
        let mut offsets = DVector::zeros(5);
        offsets.rows_mut(0, 4).copy_from(cube.offsets());
        offsets[4] = 1.2;
        let poly = Polytope::new(facets, offsets);
        let small = volume_estimate(&poly, 10_000, 1).unwrap();
        let big = volume_estimate(&poly, 20_000, 1).unwrap();
        let ratio = big.stderr / small.stderr;
        let expect = 1.0 / 2f64.sqrt();
        assert!(
            (ratio - expect).abs() / expect < 0.3,
            "stderr ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn unbounded_polytope_rejected() {
        let facets = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let offsets = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            volume_estimate(&Polytope::new(facets, offsets), 100, 0),
            Err(GeometryError::Unbounded(_))
        ));
    }

    #[test]
    fn aggregate_range_of_boxes() {
        let range = aggregate_range(None, &[(-5.0, 5.0), (-5.0, 5.0)]).unwrap();
        assert_abs_diff_eq!(range.0, -10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(range.1, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn aggregate_range_matches_vertex_enumeration() {
        // 2D oracle: enumerate facet-pair intersections, keep feasible
        // vertices, take extreme coordinate sums.
        let facets = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -1.0, 0.4, 0.3, -1.0, -0.2, 1.0]);
        let offsets = DVector::from_vec(vec![1.0, 0.8, 0.6, 0.9]);
        let poly = Polytope::new(facets.clone(), offsets.clone());
        let (lo, hi) = aggregate_range(Some(&poly), &[]).unwrap();

        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let det = facets[(i, 0)] * facets[(j, 1)] - facets[(i, 1)] * facets[(j, 0)];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (offsets[i] * facets[(j, 1)] - facets[(i, 1)] * offsets[j]) / det;
                let y = (facets[(i, 0)] * offsets[j] - offsets[i] * facets[(j, 0)]) / det;
                let v = DVector::from_vec(vec![x, y]);
                if poly.contains(&v, 1e-9) {
                    best = best.max(x + y);
                    worst = worst.min(x + y);
                }
            }
        }
        assert_abs_diff_eq!(hi, best, epsilon = 1e-7);
        assert_abs_diff_eq!(lo, worst, epsilon = 1e-7);
    }

    #[test]
    fn aggregate_range_of_fine_disc_matches_support() {
        // A 64-facet polygon around the 5 kW disc: the aggregate range along
        // (1,1) approaches the ellipsoid support 5 sqrt(2).
        let rho = 64usize;
        let mut rows = Vec::new();
        for r in 0..2 * rho {
            let t = std::f64::consts::PI * r as f64 / rho as f64;
            rows.push([t.cos(), t.sin()]);
        }
        let facets = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
        let offsets = DVector::from_element(rows.len(), 5.0);
        let poly = Polytope::new(facets, offsets);
        let (lo, hi) = aggregate_range(Some(&poly), &[]).unwrap();
        let support = 5.0 * 2f64.sqrt();
        assert!((hi - support).abs() / support < 0.01);
        assert!((lo + support).abs() / support < 0.01);
    }

    #[test]
    fn residual_polytope_inscribes_the_ellipsoid() {
        use crate::constraints::assemble_feeder_system;
        use crate::feeder::{build_sensitivities, synth};
        use crate::robust::UncertaintyModel;
        use crate::solver::{build_problem, solve, Partition, SolverOptions};
        use rand::Rng;

        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        let cs = assemble_feeder_system(&feeder, &sens, 0.9025, 1.1025, 8).unwrap();
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0, 1]).unwrap(),
            UncertaintyModel::nominal(feeder.s_fixed()),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        let poly = residual_polytope(&dp, &sol).unwrap();

        // 10^3 boundary directions: W u + center stays inside the polytope.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let mut u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0f64));
            if u.norm() == 0.0 {
                continue;
            }
            u = u.normalize();
            let p = &sol.w_kw * u + &sol.center_kw;
            assert!(poly.contains(&p, 1e-6), "boundary point escaped: {p}");
        }

        // The inscription is strict somewhere: the polytope reaches at least
        // as far as the ellipsoid support in every probed direction, further
        // in at least one.
        let mut strict = false;
        for k in 0..16 {
            let t = std::f64::consts::PI * k as f64 / 8.0;
            let d = DVector::from_vec(vec![t.cos(), t.sin()]);
            let (_, sup) = ellipsoid_support(&sol.w_kw, &sol.center_kw, &d);
            let c = -&d;
            let reach = match solve_lp(
                &c,
                poly.facets(),
                poly.offsets(),
                None,
                &ConicSettings::default(),
            ) {
                Ok(lp) => -lp.objective,
                Err(e) => panic!("support LP failed: {e}"),
            };
            // Tangent rows hold to solver tolerance (~1e-8 pu, 1e-6 kW here).
            assert!(reach >= sup - 1e-5, "direction {k}: {reach} < {sup}");
            if reach > sup + 1e-3 {
                strict = true;
            }
        }
        assert!(strict, "polytope coincides with the ellipsoid everywhere");
    }

    #[test]
    fn residual_polytope_without_noncoordinated_is_plain_rhs() {
        use crate::constraints::assemble_feeder_system;
        use crate::feeder::{build_sensitivities, synth};
        use crate::robust::UncertaintyModel;
        use crate::solver::{build_problem, residual_offsets_pu, solve, Partition, SolverOptions};

        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        let cs = assemble_feeder_system(&feeder, &sens, 0.9025, 1.1025, 8).unwrap();
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0, 1, 2]).unwrap(),
            UncertaintyModel::nominal(feeder.s_fixed()),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        // Nothing to subtract: residual offsets equal b_q at the optimum.
        let offsets = residual_offsets_pu(&dp, &sol);
        let q_pu = sol.q_kvar.map(|v| v / feeder.base_kva());
        let rhs = cs.b_q(dp.uncertainty.s_fixed_nominal(), &q_pu);
        assert!((offsets - rhs).amax() < 1e-12);
    }

    #[test]
    fn geometric_mean_examples() {
        assert_abs_diff_eq!(
            geometric_mean_size(25.0, 4.0, 3).unwrap(),
            100f64.powf(1.0 / 3.0),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(geometric_mean_size(7.0, 1.0, 1).unwrap(), 7.0);
        assert_abs_diff_eq!(geometric_mean_size(0.0, 3.0, 2).unwrap(), 0.0);
        assert!(geometric_mean_size(1.0, 1.0, 0).is_err());
    }
}
