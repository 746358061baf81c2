//! Weight normalization, fairness coefficients, and disparity metrics.
//!
//! Export and import headroom are compared across participants: each
//! non-coordinated customer is one participant, the coordinated cohort is a
//! single participant with a group-level weight. The Gini coefficient over
//! weight-normalized allocations measures how far the design strays from the
//! configured access rights.

use serde::Serialize;
use thiserror::Error;

use crate::solver::{EnvelopeSolution, FairnessInputs, Partition};

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("all weights are zero in an enabled direction ({0})")]
    AllZeroWeights(&'static str),
    #[error("sigma must lie in [0, 1], got {0}")]
    SigmaOutOfRange(f64),
    #[error("weights must be nonnegative")]
    NegativeWeight,
    #[error("no participants left after excluding zero weights")]
    NoParticipants,
    #[error("gini undefined: {0}")]
    GiniUndefined(&'static str),
}

/// Raw fairness configuration: per-direction weights for the group and each
/// non-coordinated customer (partition order), plus relaxation parameters.
#[derive(Debug, Clone)]
pub struct FairnessConfig {
    pub weight_m_plus: f64,
    pub weight_m_minus: f64,
    pub weights_n_plus: Vec<f64>,
    pub weights_n_minus: Vec<f64>,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
}

impl FairnessConfig {
    /// Symmetric weights and relaxation in both directions.
    pub fn symmetric(weight_m: f64, weights_n: Vec<f64>, sigma: f64) -> Self {
        FairnessConfig {
            weight_m_plus: weight_m,
            weight_m_minus: weight_m,
            weights_n_plus: weights_n.clone(),
            weights_n_minus: weights_n,
            sigma_plus: sigma,
            sigma_minus: sigma,
        }
    }
}

/// Normalized weights per direction: `alpha_k = w_k / (w_M + sum w_j)`.
#[derive(Debug, Clone, Serialize)]
pub struct Alphas {
    pub alpha_m_plus: f64,
    pub alpha_m_minus: f64,
    pub alpha_n_plus: Vec<f64>,
    pub alpha_n_minus: Vec<f64>,
}

pub fn normalize_weights(fc: &FairnessConfig) -> Result<Alphas, FairnessError> {
    for sigma in [fc.sigma_plus, fc.sigma_minus] {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(FairnessError::SigmaOutOfRange(sigma));
        }
    }
    let check = |group: f64, rest: &[f64], dir: &'static str| -> Result<f64, FairnessError> {
        if group < 0.0 || rest.iter().any(|w| *w < 0.0) {
            return Err(FairnessError::NegativeWeight);
        }
        let total = group + rest.iter().sum::<f64>();
        if total <= 0.0 {
            return Err(FairnessError::AllZeroWeights(dir));
        }
        Ok(total)
    };
    let tp = check(fc.weight_m_plus, &fc.weights_n_plus, "export")?;
    let tm = check(fc.weight_m_minus, &fc.weights_n_minus, "import")?;
    Ok(Alphas {
        alpha_m_plus: fc.weight_m_plus / tp,
        alpha_m_minus: fc.weight_m_minus / tm,
        alpha_n_plus: fc.weights_n_plus.iter().map(|w| w / tp).collect(),
        alpha_n_minus: fc.weights_n_minus.iter().map(|w| w / tm).collect(),
    })
}

/// Bundle normalized weights with the relaxation parameters for the solver.
pub fn solver_inputs(fc: &FairnessConfig) -> Result<FairnessInputs, FairnessError> {
    let alphas = normalize_weights(fc)?;
    Ok(FairnessInputs {
        alpha_m_plus: alphas.alpha_m_plus,
        alpha_m_minus: alphas.alpha_m_minus,
        alpha_n_plus: alphas.alpha_n_plus,
        alpha_n_minus: alphas.alpha_n_minus,
        sigma_plus: fc.sigma_plus,
        sigma_minus: fc.sigma_minus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Participant {
    Group,
    /// Customer index into the feeder's customer list.
    Customer {
        customer: usize,
    },
}

/// Weight-normalized allocations `x_k = (a_k+ + a_k-) / (alpha_k+ + alpha_k-)`
/// in kW per unit weight; participants with zero combined weight excluded.
pub fn weight_normalized_allocations(
    sol: &EnvelopeSolution,
    alphas: &Alphas,
    partition: &Partition,
) -> Result<Vec<(Participant, f64)>, FairnessError> {
    let mut out = Vec::new();
    if !sol.coordinated.is_empty() {
        let denom = alphas.alpha_m_plus + alphas.alpha_m_minus;
        if denom > 0.0 {
            let a_plus: f64 = sol.pm_plus_kw.sum();
            let a_minus: f64 = -sol.pm_minus_kw.sum();
            out.push((Participant::Group, (a_plus + a_minus) / denom));
        }
    }
    for (idx, &cust) in partition.noncoordinated().iter().enumerate() {
        let denom = alphas.alpha_n_plus[idx] + alphas.alpha_n_minus[idx];
        if denom <= 0.0 {
            continue;
        }
        let (a_plus, a_minus) = match sol.noncoordinated.iter().position(|&c| c == cust) {
            Some(k) => (sol.p_plus_kw[k], -sol.p_minus_kw[k]),
            None => (0.0, 0.0), // pinned: no headroom allocated
        };
        out.push((
            Participant::Customer { customer: cust },
            (a_plus + a_minus) / denom,
        ));
    }
    if out.is_empty() {
        return Err(FairnessError::NoParticipants);
    }
    Ok(out)
}

/// Gini coefficient `G = sum_ij |x_i - x_j| / (2 n^2 mean)` over nonnegative
/// allocations; 0 is perfectly equal, upper bound `1 - 1/n`.
pub fn gini(x: &[f64]) -> Result<f64, FairnessError> {
    if x.is_empty() {
        return Err(FairnessError::GiniUndefined("empty vector"));
    }
    if x.iter().any(|v| *v < 0.0) {
        return Err(FairnessError::GiniUndefined("negative entry"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(FairnessError::GiniUndefined("zero mean"));
    }
    let mut spread = 0.0;
    for a in x {
        for b in x {
            spread += (a - b).abs();
        }
    }
    Ok(spread / (2.0 * n * n * mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn equal_weights_normalize_to_half() {
        let fc = FairnessConfig::symmetric(5.0, vec![5.0], 1.0);
        let a = normalize_weights(&fc).unwrap();
        assert_abs_diff_eq!(a.alpha_m_plus, 0.5);
        assert_abs_diff_eq!(a.alpha_n_plus[0], 0.5);
    }

    #[test]
    fn normalization_example() {
        let fc = FairnessConfig::symmetric(5.0, vec![3.0, 5.0, 7.0], 0.5);
        let a = normalize_weights(&fc).unwrap();
        assert_abs_diff_eq!(a.alpha_n_plus[0], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(a.alpha_n_plus[1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a.alpha_n_plus[2], 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(a.alpha_m_plus, 0.25, epsilon = 1e-12);
        let sum = a.alpha_m_plus + a.alpha_n_plus.iter().sum::<f64>();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let fc = FairnessConfig::symmetric(0.0, vec![0.0, 0.0], 0.5);
        assert!(matches!(
            normalize_weights(&fc),
            Err(FairnessError::AllZeroWeights(_))
        ));
    }

    fn dummy_solution(p_plus: f64, p_minus: f64) -> EnvelopeSolution {
        EnvelopeSolution {
            coordinated: vec![],
            noncoordinated: vec![0],
            pinned: vec![],
            w_kw: DMatrix::zeros(0, 0),
            center_kw: DVector::zeros(0),
            p_minus_kw: DVector::from_vec(vec![p_minus]),
            p_plus_kw: DVector::from_vec(vec![p_plus]),
            q_kvar: DVector::zeros(1),
            pm_plus_kw: DVector::zeros(0),
            pm_minus_kw: DVector::zeros(0),
            objective: 0.0,
            status: "Solved".into(),
            iterations: 0,
            solve_time: 0.0,
            rows_kept: 0,
            rows_dropped: 0,
        }
    }

    #[test]
    fn allocation_example() {
        // P+ = 3, P- = -3, alpha+ = alpha- = 0.25 -> x = 12.
        let sol = dummy_solution(3.0, -3.0);
        let alphas = Alphas {
            alpha_m_plus: 0.0,
            alpha_m_minus: 0.0,
            alpha_n_plus: vec![0.25],
            alpha_n_minus: vec![0.25],
        };
        let feeder =
            crate::feeder::Feeder::from_doc(&crate::feeder::synth::boxes_only(1, 5.0, 2.0))
                .unwrap();
        let partition = Partition::new(&feeder, vec![]).unwrap();
        let x = weight_normalized_allocations(&sol, &alphas, &partition).unwrap();
        assert_eq!(x.len(), 1);
        assert_abs_diff_eq!(x[0].1, 12.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_customer_excluded() {
        let sol = dummy_solution(3.0, -3.0);
        let alphas = Alphas {
            alpha_m_plus: 0.0,
            alpha_m_minus: 0.0,
            alpha_n_plus: vec![0.0],
            alpha_n_minus: vec![0.0],
        };
        let feeder =
            crate::feeder::Feeder::from_doc(&crate::feeder::synth::boxes_only(1, 5.0, 2.0))
                .unwrap();
        let partition = Partition::new(&feeder, vec![]).unwrap();
        assert!(matches!(
            weight_normalized_allocations(&sol, &alphas, &partition),
            Err(FairnessError::NoParticipants)
        ));
    }

    #[test]
    fn gini_examples() {
        assert_abs_diff_eq!(gini(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(gini(&[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.75, epsilon = 1e-12);
        assert!(matches!(
            gini(&[0.0, 0.0]),
            Err(FairnessError::GiniUndefined(_))
        ));
    }

    proptest! {
        #[test]
        fn gini_scale_and_permutation_invariant(
            mut x in proptest::collection::vec(0.0f64..10.0, 2..12),
            kappa in 0.1f64..10.0,
        ) {
            prop_assume!(x.iter().sum::<f64>() > 0.0);
            let g = gini(&x).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * kappa).collect();
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-9);
            x.reverse();
            prop_assert!((gini(&x).unwrap() - g).abs() < 1e-12);
            let n = x.len() as f64;
            prop_assert!(g >= -1e-12 && g <= 1.0 - 1.0 / n + 1e-12);
        }
    }
}
