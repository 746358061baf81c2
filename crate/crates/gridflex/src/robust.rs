//! Budgeted-box fixed-load uncertainty and the closed-form row tightening.
//!
//! Deviations `Delta * zeta` around the nominal fixed injections range over
//! `U(Gamma) = { |zeta_i| <= 1, sum |zeta_i| <= Gamma }`. The worst case of a
//! linear form over this set has a closed form: take the `floor(Gamma)`
//! largest absolute coefficients at full weight plus the fractional remainder
//! on the next one. Each constraint row is tightened by that amount.

use nalgebra::DVector;
use thiserror::Error;

use crate::constraints::ConstraintSystem;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("uncertainty budget must be nonnegative, got {0}")]
    NegativeBudget(f64),
    #[error("brute-force oracle limited to 12 components, got {0}")]
    DimensionTooLarge(usize),
}

/// Nominal fixed injections with componentwise deviation magnitudes and a
/// total budget. Active and reactive deviations are stacked to match the 2N
/// columns of `H`, and budgeted jointly under one `Gamma`.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    s_fixed_nominal: DVector<f64>,
    delta: DVector<f64>,
    gamma: f64,
}

impl UncertaintyModel {
    pub fn new(
        s_fixed_nominal: DVector<f64>,
        delta: DVector<f64>,
        gamma: f64,
    ) -> Result<Self, RobustError> {
        if gamma < 0.0 {
            return Err(RobustError::NegativeBudget(gamma));
        }
        assert_eq!(s_fixed_nominal.len(), delta.len());
        assert!(delta.iter().all(|d| *d >= 0.0), "deviations must be >= 0");
        Ok(UncertaintyModel {
            s_fixed_nominal,
            delta,
            gamma,
        })
    }

    /// No uncertainty: zero deviations, zero budget.
    pub fn nominal(s_fixed_nominal: DVector<f64>) -> Self {
        let delta = DVector::zeros(s_fixed_nominal.len());
        UncertaintyModel {
            s_fixed_nominal,
            delta,
            gamma: 0.0,
        }
    }

    /// Deviations proportional to the nominal magnitudes: `delta = eta |s|`.
    /// With `include_q = false` the reactive halves are zeroed.
    pub fn proportional(
        s_fixed_nominal: DVector<f64>,
        eta: f64,
        gamma: f64,
        include_q: bool,
    ) -> Result<Self, RobustError> {
        let dim = s_fixed_nominal.len();
        let half = dim / 2;
        let delta = DVector::from_fn(dim, |i, _| {
            if !include_q && i >= half {
                0.0
            } else {
                eta * s_fixed_nominal[i].abs()
            }
        });
        UncertaintyModel::new(s_fixed_nominal, delta, gamma)
    }

    pub fn s_fixed_nominal(&self) -> &DVector<f64> {
        &self.s_fixed_nominal
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_nominal(&self) -> bool {
        self.gamma == 0.0 || self.delta.amax() == 0.0
    }
}

/// Worst case of `h . zeta` over `U(gamma)`: sum of the `floor(gamma)`
/// largest `|h_j|` plus the fractional part times the next largest. Ties are
/// broken by index order (the value is tie-independent).
pub fn worst_case_delta(h_row: &[f64], gamma: f64) -> Result<f64, RobustError> {
    if gamma < 0.0 {
        return Err(RobustError::NegativeBudget(gamma));
    }
    let n = h_row.len();
    let mut mags: Vec<f64> = h_row.iter().map(|h| h.abs()).collect();
    if gamma >= n as f64 {
        return Ok(mags.iter().sum());
    }
    mags.sort_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    let k = gamma.floor() as usize;
    let theta = gamma - k as f64;
    let mut total: f64 = mags[..k].iter().sum();
    if theta > 0.0 && k < n {
        total += theta * mags[k];
    }
    Ok(total)
}

/// Exact maximum of `h . zeta` over the vertex set of `U(gamma)`, by
/// enumeration. Test oracle for [`worst_case_delta`]; exponential in the
/// component count, hence the hard cap.
pub fn brute_force_delta(h_row: &[f64], gamma: f64) -> Result<f64, RobustError> {
    if gamma < 0.0 {
        return Err(RobustError::NegativeBudget(gamma));
    }
    let n = h_row.len();
    if n > 12 {
        return Err(RobustError::DimensionTooLarge(n));
    }
    if gamma >= n as f64 {
        return Ok(h_row.iter().map(|h| h.abs()).sum());
    }
    let k = gamma.floor() as usize;
    let theta = gamma - k as f64;
    // Vertices of {0 <= s <= 1, 1.s <= gamma}: indicator subsets of size
    // <= k, optionally one extra coordinate at theta; the sign of zeta
    // aligns with h, giving |h| weights.
    let mut best = 0.0f64;
    for mask in 0u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size > k {
            continue;
        }
        let value: f64 = h_row
            .iter()
            .enumerate()
            .filter(|(j, _)| mask & (1 << j) != 0)
            .map(|(_, h)| h.abs())
            .sum();
        best = best.max(value);
        if size == k && theta > 0.0 {
            for (j, h) in h_row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    best = best.max(value + theta * h.abs());
                }
            }
        }
    }
    Ok(best)
}

/// Per-row worst-case tightenings over rows of `H * diag(delta)`.
///
/// Customer device rows are exempt: they bound the flexible component, and
/// the realized fixed load enters their anchor and their `H s_fixed` shift
/// identically, so the deviation cancels instead of tightening. Only the
/// network rows (voltage, thermal), whose limits are fixed physical bounds
/// on the total injection, carry the worst-case term.
pub fn row_tightenings(cs: &ConstraintSystem, um: &UncertaintyModel) -> DVector<f64> {
    let h = cs.h();
    let dim = um.delta().len();
    assert_eq!(h.ncols(), dim, "uncertainty dimension must match H columns");
    DVector::from_fn(cs.rows(), |row, _| {
        if matches!(cs.tags()[row], crate::constraints::RowTag::Customer { .. }) {
            return 0.0;
        }
        let weighted: Vec<f64> = (0..dim).map(|j| h[(row, j)] * um.delta()[j]).collect();
        worst_case_delta(&weighted, um.gamma()).expect("gamma validated at construction")
    })
}

/// Robust right-hand side `b_qGamma = c - H s_nominal - B q - delta(Gamma)`.
pub fn tighten_rhs(cs: &ConstraintSystem, um: &UncertaintyModel, q: &DVector<f64>) -> DVector<f64> {
    let mut rhs = cs.b_q(um.s_fixed_nominal(), q);
    if !um.is_nominal() {
        rhs -= row_tightenings(cs, um);
    }
    rhs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::assemble_feeder_system;
    use crate::feeder::{build_sensitivities, synth};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_budget_recovers_nominal() {
        assert_eq!(worst_case_delta(&[3.0, 1.0, 2.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn fractional_budget_example() {
        // Frozen from the brute-force oracle: 3 + 0.5 * 2 = 4.
        let closed = worst_case_delta(&[3.0, 1.0, 2.0], 1.5).unwrap();
        let brute = brute_force_delta(&[3.0, 1.0, 2.0], 1.5).unwrap();
        assert_abs_diff_eq!(closed, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(brute, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn full_budget_is_l1_norm() {
        assert_abs_diff_eq!(
            worst_case_delta(&[-3.0, 1.0, 2.0], 3.0).unwrap(),
            6.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            brute_force_delta(&[-3.0, 1.0, 2.0], 3.0).unwrap(),
            6.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_row_gives_zero() {
        for gamma in [0.0, 0.7, 2.0, 10.0] {
            assert_eq!(brute_force_delta(&[0.0; 4], gamma).unwrap(), 0.0);
            assert_eq!(worst_case_delta(&[0.0; 4], gamma).unwrap(), 0.0);
        }
    }

    #[test]
    fn negative_budget_rejected() {
        assert!(matches!(
            worst_case_delta(&[1.0], -0.1),
            Err(RobustError::NegativeBudget(_))
        ));
        assert!(matches!(
            brute_force_delta(&[1.0], -0.1),
            Err(RobustError::NegativeBudget(_))
        ));
    }

    #[test]
    fn oracle_equivalence_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gamma = 0.5 * rng.gen_range(0..=2 * n as u32) as f64;
            let closed = worst_case_delta(&h, gamma).unwrap();
            let brute = brute_force_delta(&h, gamma).unwrap();
            assert!(
                (closed - brute).abs() <= 1e-9,
                "mismatch at h={h:?} gamma={gamma}: {closed} vs {brute}"
            );
        }
    }

    #[test]
    fn tighten_rhs_nominal_cases() {
        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        let cs = assemble_feeder_system(&feeder, &sens, 0.9025, 1.1025, 4).unwrap();
        let n = feeder.n();
        let q = DVector::zeros(n);
        let s = feeder.s_fixed();

        // Gamma = 0 and Delta = 0 both reproduce b_q.
        let um0 = UncertaintyModel::proportional(s.clone(), 0.2, 0.0, true).unwrap();
        assert_eq!(tighten_rhs(&cs, &um0, &q), cs.b_q(&s, &q));
        let um1 = UncertaintyModel::proportional(s.clone(), 0.0, 5.0, true).unwrap();
        assert_eq!(tighten_rhs(&cs, &um1, &q), cs.b_q(&s, &q));
    }

    #[test]
    fn tightening_is_monotone_in_gamma() {
        let feeder = synth::branched_test_feeder();
        let sens = build_sensitivities(&feeder);
        let cs = assemble_feeder_system(&feeder, &sens, 0.9025, 1.1025, 4).unwrap();
        let q = DVector::zeros(feeder.n());
        let s = feeder.s_fixed();
        let mut prev: Option<DVector<f64>> = None;
        for gamma in [0.0, 0.5, 1.0, 2.5, 4.0, 12.0] {
            let um = UncertaintyModel::proportional(s.clone(), 0.3, gamma, true).unwrap();
            let rhs = tighten_rhs(&cs, &um, &q);
            if let Some(prev) = prev {
                for i in 0..rhs.len() {
                    assert!(rhs[i] <= prev[i] + 1e-12);
                }
            }
            prev = Some(rhs);
        }
    }

    proptest! {
        #[test]
        fn delta_matches_brute_force(
            h in proptest::collection::vec(-10.0f64..10.0, 1..8),
            gamma_times_two in 0u32..16,
        ) {
            let gamma = gamma_times_two as f64 / 2.0;
            let closed = worst_case_delta(&h, gamma).unwrap();
            let brute = brute_force_delta(&h, gamma).unwrap();
            prop_assert!((closed - brute).abs() <= 1e-9);
        }

        #[test]
        fn delta_invariant_to_signs_and_permutations(
            h in proptest::collection::vec(-10.0f64..10.0, 2..8),
            gamma in 0.0f64..8.0,
        ) {
            let base = worst_case_delta(&h, gamma).unwrap();
            let flipped: Vec<f64> = h.iter().map(|v| -v).collect();
            prop_assert!((worst_case_delta(&flipped, gamma).unwrap() - base).abs() < 1e-12);
            let mut rev = h.clone();
            rev.reverse();
            prop_assert!((worst_case_delta(&rev, gamma).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn delta_concave_piecewise_linear_in_gamma(
            h in proptest::collection::vec(-10.0f64..10.0, 2..8),
            idx in 0usize..6,
        ) {
            // Nondecreasing, concave, linear between integer breakpoints.
            let g0 = idx as f64;
            let d = |g: f64| worst_case_delta(&h, g).unwrap();
            prop_assert!(d(g0 + 1.0) >= d(g0) - 1e-12);
            let mid = d(g0 + 0.5);
            let lin = 0.5 * (d(g0) + d(g0 + 1.0));
            prop_assert!((mid - lin).abs() < 1e-9, "not linear on [{g0}, {}]", g0 + 1.0);
            // Concavity across the breakpoint.
            let left = d(g0 + 1.0) - d(g0 + 0.5);
            let right = d(g0 + 1.5) - d(g0 + 1.0);
            prop_assert!(right <= left + 1e-9);
        }
    }

    #[test]
    fn integral_budget_uses_unit_entries() {
        // With an integer budget the optimizer never needs a fractional
        // coordinate: compare against enumeration restricted to {0, 1}.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gamma = rng.gen_range(0..=n) as f64;
            let mut best = 0.0f64;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as f64 <= gamma {
                    let v: f64 = (0..n)
                        .filter(|j| mask & (1 << j) != 0)
                        .map(|j| h[j].abs())
                        .sum();
                    best = best.max(v);
                }
            }
            assert_abs_diff_eq!(worst_case_delta(&h, gamma).unwrap(), best, epsilon = 1e-12);
        }
    }
}
