//! Convex design of maximum-volume operating envelopes.
//!
//! The design problem picks an ellipsoid `{W u + center : ||u|| <= 1}` for
//! the coordinated customers, an interval `[P-, P+]` per non-coordinated
//! customer, and reactive setpoints `q`, maximizing
//! `log det W + sum log(P+ - P-)` subject to every network row holding for
//! every admissible combination of injections. Each row becomes one
//! second-order-cone constraint `||W a|| + a.center + worst-case(N) <= rhs`.
//!
//! Internally the ellipsoid is parametrized by a lower-triangular factor `L`
//! with `W = (L L^T)^(1/2)`: the two describe the same set, every constraint
//! uses `W` only through `||W^T d||_2 = ||L^T d||_2`, and
//! `log det W = sum log L_kk`, so the factor form solves over nonnegative,
//! second-order, and exponential cones only. The published `W` is recovered
//! by a symmetric square root, and [`verify_solution`] re-checks every
//! constraint family against it from scratch.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::conic::{ConicError, ConicProgram, ConicSettings, Terms};
use crate::constraints::ConstraintSystem;
use crate::feeder::Feeder;
use crate::robust::{row_tightenings, UncertaintyModel};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid partition: {0}")]
    BadPartition(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("problem infeasible; first blocking row: {tag}")]
    Infeasible { tag: String },
    #[error("conic solve failed: {0}")]
    Solver(#[from] ConicError),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Coordinated / non-coordinated split over customer indices.
#[derive(Debug, Clone)]
pub struct Partition {
    coordinated: Vec<usize>,
    noncoordinated: Vec<usize>,
}

impl Partition {
    /// Every listed customer index coordinates; the rest act independently.
    pub fn new(feeder: &Feeder, coordinated: Vec<usize>) -> Result<Self, SolveError> {
        let n_cust = feeder.customers().len();
        let mut seen = vec![false; n_cust];
        for &c in &coordinated {
            if c >= n_cust {
                return Err(SolveError::BadPartition(format!(
                    "customer index {c} out of range ({n_cust} customers)"
                )));
            }
            if seen[c] {
                return Err(SolveError::BadPartition(format!(
                    "customer {c} listed twice"
                )));
            }
            seen[c] = true;
        }
        let noncoordinated = (0..n_cust).filter(|c| !seen[*c]).collect();
        let mut coordinated = coordinated;
        coordinated.sort_unstable();
        Ok(Partition {
            coordinated,
            noncoordinated,
        })
    }

    /// Build from node ids (each must host a customer).
    pub fn from_node_ids(feeder: &Feeder, ids: &[String]) -> Result<Self, SolveError> {
        let mut coordinated = Vec::with_capacity(ids.len());
        for id in ids {
            let node = feeder
                .node_index(id)
                .ok_or_else(|| SolveError::BadPartition(format!("unknown node `{id}`")))?;
            let cust = feeder
                .customers()
                .iter()
                .position(|c| c.node == node)
                .ok_or_else(|| {
                    SolveError::BadPartition(format!("node `{id}` hosts no customer"))
                })?;
            coordinated.push(cust);
        }
        Partition::new(feeder, coordinated)
    }

    pub fn coordinated(&self) -> &[usize] {
        &self.coordinated
    }

    pub fn noncoordinated(&self) -> &[usize] {
        &self.noncoordinated
    }
}

/// Normalized fairness inputs for the design problem. Alphas follow the
/// partition's non-coordinated order; the coordinated cohort is one
/// participant.
#[derive(Debug, Clone)]
pub struct FairnessInputs {
    pub alpha_m_plus: f64,
    pub alpha_m_minus: f64,
    pub alpha_n_plus: Vec<f64>,
    pub alpha_n_minus: Vec<f64>,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: u32,
    /// Relative floor on the ellipsoid factor diagonal (scaled by the
    /// largest device limit); keeps `log det` finite and `W` strictly PSD.
    pub epsilon: f64,
    /// Post-hoc check that the origin lies in the residual polytope.
    pub strict_origin: bool,
    /// Keep the directional machinery even when fairness is inactive.
    pub force_directional: bool,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 200,
            epsilon: 1e-7,
            strict_origin: false,
            force_directional: false,
            verbose: false,
        }
    }
}

/// Assembled design problem. Construction validates shapes; the conic
/// program is generated lazily by [`solve`] and [`DesignProblem::census`].
pub struct DesignProblem<'a> {
    pub cs: &'a ConstraintSystem,
    pub feeder: &'a Feeder,
    pub partition: Partition,
    pub uncertainty: UncertaintyModel,
    pub fairness: Option<FairnessInputs>,
    pub opts: SolverOptions,
}

pub fn build_problem<'a>(
    cs: &'a ConstraintSystem,
    feeder: &'a Feeder,
    partition: Partition,
    uncertainty: UncertaintyModel,
    fairness: Option<FairnessInputs>,
    opts: SolverOptions,
) -> Result<DesignProblem<'a>, SolveError> {
    if cs.n() != feeder.n() {
        return Err(SolveError::BadConfig(format!(
            "constraint system has {} columns for {} nodes",
            cs.n(),
            feeder.n()
        )));
    }
    if uncertainty.s_fixed_nominal().len() != 2 * feeder.n() {
        return Err(SolveError::BadConfig(
            "uncertainty model dimension must be 2N".into(),
        ));
    }
    if let Some(f) = &fairness {
        for sigma in [f.sigma_plus, f.sigma_minus] {
            if !(0.0..=1.0).contains(&sigma) {
                return Err(SolveError::BadConfig(format!(
                    "sigma must lie in [0,1], got {sigma}"
                )));
            }
        }
        if f.alpha_n_plus.len() != partition.noncoordinated.len()
            || f.alpha_n_minus.len() != partition.noncoordinated.len()
        {
            return Err(SolveError::BadConfig(
                "fairness alphas must align with the non-coordinated set".into(),
            ));
        }
    }
    if opts.epsilon <= 0.0 {
        return Err(SolveError::BadConfig("epsilon must be positive".into()));
    }
    Ok(DesignProblem {
        cs,
        feeder,
        partition,
        uncertainty,
        fairness,
        opts,
    })
}

/// Constraint census of the generated conic program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Census {
    pub soc_blocks: usize,
    pub exp_blocks: usize,
    pub linear_rows: usize,
    pub variables: usize,
    pub network_rows_kept: usize,
    pub network_rows_dropped: usize,
    pub directional: bool,
}

/// Optimal envelope design, reported in kW/kVAr.
#[derive(Debug, Clone)]
pub struct EnvelopeSolution {
    /// Active coordinated customer indices (zero-limit members are pinned).
    pub coordinated: Vec<usize>,
    /// Active non-coordinated customer indices.
    pub noncoordinated: Vec<usize>,
    /// Customers pinned to `[0, 0]` (zero device limit).
    pub pinned: Vec<usize>,
    /// Symmetric PSD ellipsoid shape over the active coordinated set, kW.
    pub w_kw: DMatrix<f64>,
    pub center_kw: DVector<f64>,
    pub p_minus_kw: DVector<f64>,
    pub p_plus_kw: DVector<f64>,
    /// Reactive setpoints per node, kVAr (zero off customer nodes).
    pub q_kvar: DVector<f64>,
    pub pm_plus_kw: DVector<f64>,
    pub pm_minus_kw: DVector<f64>,
    /// `log det W + sum log(P+ - P-)` in kW units over active customers.
    pub objective: f64,
    pub status: String,
    pub iterations: u32,
    pub solve_time: f64,
    pub rows_kept: usize,
    pub rows_dropped: usize,
}

impl EnvelopeSolution {
    pub fn n_active(&self) -> usize {
        self.coordinated.len() + self.noncoordinated.len()
    }
}

/// Internal index map of the conic variable vector.
struct Layout {
    nm: usize,
    nn: usize,
    nq: usize,
    l0: usize,
    c0: usize,
    pp0: usize,
    pm0: usize,
    q0: usize,
    dir: Option<DirLayout>,
}

struct DirLayout {
    pmp0: usize,
    pmm0: usize,
    fp: usize,
    fm: usize,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

/// Per-problem reduced data: active customer columns and constant rhs.
struct Reduced {
    active_m: Vec<usize>,
    active_n: Vec<usize>,
    pinned: Vec<usize>,
    q_customers: Vec<usize>,
    /// A-columns for active coordinated / non-coordinated, per kept row.
    a_m: DMatrix<f64>,
    a_n: DMatrix<f64>,
    b_q: DMatrix<f64>,
    /// `c - H s_nominal - delta(Gamma)` on kept rows.
    r0: DVector<f64>,
    kept: Vec<usize>,
    dropped: usize,
    caps_m: Vec<f64>,
    caps_n: Vec<f64>,
    q_caps: Vec<f64>,
}

fn reduce(dp: &DesignProblem) -> Result<Reduced, SolveError> {
    let feeder = dp.feeder;
    let cs = dp.cs;
    let customers = feeder.customers();

    let active_m: Vec<usize> = dp
        .partition
        .coordinated
        .iter()
        .copied()
        .filter(|&c| customers[c].p_max > 0.0)
        .collect();
    let active_n: Vec<usize> = dp
        .partition
        .noncoordinated
        .iter()
        .copied()
        .filter(|&c| customers[c].p_max > 0.0)
        .collect();
    let pinned: Vec<usize> = (0..customers.len())
        .filter(|&c| customers[c].p_max <= 0.0)
        .collect();
    let q_customers: Vec<usize> = (0..customers.len())
        .filter(|&c| customers[c].q_max > 0.0)
        .collect();

    let caps_m: Vec<f64> = active_m.iter().map(|&c| customers[c].p_max).collect();
    let caps_n: Vec<f64> = active_n.iter().map(|&c| customers[c].p_max).collect();
    let q_caps: Vec<f64> = q_customers.iter().map(|&c| customers[c].q_max).collect();

    // Constant rhs including the robust tightening.
    let n = feeder.n();
    let s_bar = dp.uncertainty.s_fixed_nominal();
    let mut r0_full = cs.b_q(s_bar, &DVector::zeros(n));
    if !dp.uncertainty.is_nominal() {
        r0_full -= row_tightenings(cs, &dp.uncertainty);
    }

    // Keep a row iff it could bind for box-confined injections and setpoints.
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for row in 0..cs.rows() {
        let mut ub = 0.0;
        for (k, &c) in active_m.iter().enumerate() {
            ub += cs.a()[(row, customers[c].node)].abs() * caps_m[k];
        }
        for (k, &c) in active_n.iter().enumerate() {
            ub += cs.a()[(row, customers[c].node)].abs() * caps_n[k];
        }
        for (k, &c) in q_customers.iter().enumerate() {
            ub += cs.b()[(row, customers[c].node)].abs() * q_caps[k];
        }
        if ub == 0.0 {
            // No decision content; a negative rhs means the fixed loads
            // alone violate the network.
            if r0_full[row] < -1e-9 {
                return Err(SolveError::Infeasible {
                    tag: format!("{:?}", cs.tags()[row]),
                });
            }
            dropped += 1;
        } else if ub < r0_full[row] - 1e-9 {
            dropped += 1;
        } else {
            kept.push(row);
        }
    }

    let l = kept.len();
    let mut a_m = DMatrix::zeros(l, active_m.len());
    let mut a_n = DMatrix::zeros(l, active_n.len());
    let mut b_q = DMatrix::zeros(l, q_customers.len());
    let mut r0 = DVector::zeros(l);
    for (i, &row) in kept.iter().enumerate() {
        for (k, &c) in active_m.iter().enumerate() {
            a_m[(i, k)] = cs.a()[(row, customers[c].node)];
        }
        for (k, &c) in active_n.iter().enumerate() {
            a_n[(i, k)] = cs.a()[(row, customers[c].node)];
        }
        for (k, &c) in q_customers.iter().enumerate() {
            b_q[(i, k)] = cs.b()[(row, customers[c].node)];
        }
        r0[i] = r0_full[row];
        // Normalize each row to unit max coefficient: a pure rescaling of
        // the inequality that keeps the kernel's equilibration honest.
        let mut scale = 0.0f64;
        for k in 0..active_m.len() {
            scale = scale.max(a_m[(i, k)].abs());
        }
        for k in 0..active_n.len() {
            scale = scale.max(a_n[(i, k)].abs());
        }
        for k in 0..q_customers.len() {
            scale = scale.max(b_q[(i, k)].abs());
        }
        if scale > 0.0 {
            for k in 0..active_m.len() {
                a_m[(i, k)] /= scale;
            }
            for k in 0..active_n.len() {
                a_n[(i, k)] /= scale;
            }
            for k in 0..q_customers.len() {
                b_q[(i, k)] /= scale;
            }
            r0[i] /= scale;
        }
    }

    Ok(Reduced {
        active_m,
        active_n,
        pinned,
        q_customers,
        a_m,
        a_n,
        b_q,
        r0,
        kept,
        dropped,
        caps_m,
        caps_n,
        q_caps,
    })
}

fn directional_enabled(dp: &DesignProblem) -> bool {
    if dp.opts.force_directional {
        return true;
    }
    match &dp.fairness {
        Some(f) => f.sigma_plus < 1.0 || f.sigma_minus < 1.0,
        None => false,
    }
}

fn assemble_conic(dp: &DesignProblem, red: &Reduced) -> (ConicProgram, Layout) {
    let nm = red.active_m.len();
    let nn = red.active_n.len();
    let nq = red.q_customers.len();
    let with_dir = directional_enabled(dp) && nm + nn > 0;

    let mut prog = ConicProgram::new();
    let l0 = prog.add_vars(nm * (nm + 1) / 2).start;
    let c0 = prog.add_vars(nm).start;
    let pp0 = prog.add_vars(nn).start;
    let pm0 = prog.add_vars(nn).start;
    let q0 = prog.add_vars(nq).start;
    let tm0 = prog.add_vars(nm).start;
    let tn0 = prog.add_vars(nn).start;
    let dir = if with_dir {
        let pmp0 = prog.add_vars(nm).start;
        let pmm0 = prog.add_vars(nm).start;
        let fp = prog.add_vars(1).start;
        let fm = prog.add_vars(1).start;
        Some(DirLayout { pmp0, pmm0, fp, fm })
    } else {
        None
    };
    let layout = Layout {
        nm,
        nn,
        nq,
        l0,
        c0,
        pp0,
        pm0,
        q0,
        dir,
    };

    for k in 0..nm {
        prog.add_objective(tm0 + k, -1.0);
    }
    for k in 0..nn {
        prog.add_objective(tn0 + k, -1.0);
    }

    // Positive/negative split of the non-coordinated columns plus setpoint
    // terms, shared by several row families.
    let lin_row = |row: usize, lay: &Layout, red: &Reduced| -> Terms {
        let mut terms = Terms::new();
        for k in 0..lay.nn {
            let a = red.a_n[(row, k)];
            if a > 0.0 {
                terms.push((lay.pp0 + k, a));
            } else if a < 0.0 {
                terms.push((lay.pm0 + k, a));
            }
        }
        for k in 0..lay.nq {
            let b = red.b_q[(row, k)];
            if b != 0.0 {
                terms.push((lay.q0 + k, b));
            }
        }
        terms
    };
    // (L^T a)_k as terms over the factor entries.
    let ellip_tail = |row: usize, lay: &Layout, red: &Reduced| -> Vec<(Terms, f64)> {
        (0..lay.nm)
            .map(|k| {
                let terms: Terms = (k..lay.nm)
                    .filter(|&i| red.a_m[(row, i)] != 0.0)
                    .map(|i| (lay.l0 + tri(i, k), red.a_m[(row, i)]))
                    .collect();
                (terms, 0.0)
            })
            .collect()
    };

    for row in 0..red.kept.len() {
        let m_is_zero = (0..nm).all(|k| red.a_m[(row, k)] == 0.0);

        // Main robust row: ||L^T a_M|| + a_M.center + A_N+ P+ + A_N- P- + B q <= r0.
        let mut head = lin_row(row, &layout, red);
        for k in 0..nm {
            let a = red.a_m[(row, k)];
            if a != 0.0 {
                head.push((c0 + k, a));
            }
        }
        if nm > 0 && !m_is_zero {
            let neg_head: Terms = head.iter().map(|&(v, c)| (v, -c)).collect();
            prog.soc((&neg_head, red.r0[row]), &ellip_tail(row, &layout, red));
        } else {
            prog.le(&head, red.r0[row]);
        }

        // Zero containment of the aggregate: worst-case non-coordinated
        // contribution alone stays feasible. Coincides with the row above
        // when the coordinated columns vanish, so only push it once.
        if !m_is_zero {
            let zc = lin_row(row, &layout, red);
            prog.le(&zc, red.r0[row]);
        }

        // Directional feasibility for the cohort's export/import vectors;
        // rows without coordinated content add nothing beyond the above.
        if let Some(d) = &layout.dir {
            if !m_is_zero {
                for pm_base in [d.pmp0, d.pmm0] {
                    let mut terms = lin_row(row, &layout, red);
                    for k in 0..nm {
                        let a = red.a_m[(row, k)];
                        if a != 0.0 {
                            terms.push((pm_base + k, a));
                        }
                    }
                    prog.le(&terms, red.r0[row]);
                }
            }
        }
    }

    // Interval sign constraints and epigraphs of the log objective. The log
    // arguments are scaled by the device caps so the cone sees O(1) values;
    // the constant offsets drop out of the argmax.
    for k in 0..nn {
        prog.le(&[(pp0 + k, -1.0)], 0.0);
        prog.le(&[(pm0 + k, 1.0)], 0.0);
        let inv = 1.0 / (2.0 * red.caps_n[k]);
        prog.exp(
            (&[(tn0 + k, 1.0)], 0.0),
            (&[], 1.0),
            (&[(pp0 + k, inv), (pm0 + k, -inv)], 0.0),
        );
    }

    let scale = red
        .caps_m
        .iter()
        .chain(red.caps_n.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let eps = dp.opts.epsilon * scale;
    for k in 0..nm {
        prog.le(&[(l0 + tri(k, k), -1.0)], -eps);
        let inv = 1.0 / red.caps_m[k];
        prog.exp(
            (&[(tm0 + k, 1.0)], 0.0),
            (&[], 1.0),
            (&[(l0 + tri(k, k), inv)], 0.0),
        );
    }

    // Setpoint bounds.
    for k in 0..nq {
        prog.le(&[(q0 + k, 1.0)], red.q_caps[k]);
        prog.le(&[(q0 + k, -1.0)], red.q_caps[k]);
    }

    if let Some(d) = &layout.dir {
        // Support dominance: the directional vectors are at least as
        // permissive as the ellipsoid along the aggregate direction.
        let ones_tail: Vec<(Terms, f64)> = (0..nm)
            .map(|k| {
                let terms: Terms = (k..nm).map(|i| (l0 + tri(i, k), 1.0)).collect();
                (terms, 0.0)
            })
            .collect();
        let mut head_plus: Terms = (0..nm).map(|k| (d.pmp0 + k, 1.0)).collect();
        head_plus.extend((0..nm).map(|k| (c0 + k, -1.0)));
        prog.soc((&head_plus, 0.0), &ones_tail);
        let mut head_minus: Terms = (0..nm).map(|k| (c0 + k, 1.0)).collect();
        head_minus.extend((0..nm).map(|k| (d.pmm0 + k, -1.0)));
        prog.soc((&head_minus, 0.0), &ones_tail);

        // Total export/import definitions.
        let mut fp_def: Terms = vec![(d.fp, 1.0)];
        fp_def.extend((0..nm).map(|k| (d.pmp0 + k, -1.0)));
        fp_def.extend((0..nn).map(|k| (pp0 + k, -1.0)));
        prog.eq(&fp_def, 0.0);
        let mut fm_def: Terms = vec![(d.fm, 1.0)];
        fm_def.extend((0..nm).map(|k| (d.pmm0 + k, 1.0)));
        fm_def.extend((0..nn).map(|k| (pm0 + k, 1.0)));
        prog.eq(&fm_def, 0.0);

        // Fairness floors.
        if let Some(f) = &dp.fairness {
            let (sp, sm) = (f.sigma_plus, f.sigma_minus);
            if sp < 1.0 {
                for (k, &cust) in red.active_n.iter().enumerate() {
                    let idx = dp
                        .partition
                        .noncoordinated
                        .iter()
                        .position(|&c| c == cust)
                        .expect("active customer belongs to partition");
                    let alpha = f.alpha_n_plus[idx];
                    if alpha > 0.0 {
                        prog.le(&[(d.fp, (1.0 - sp) * alpha), (pp0 + k, -1.0)], 0.0);
                    }
                }
                if nm > 0 && f.alpha_m_plus > 0.0 {
                    let mut terms: Terms = vec![(d.fp, (1.0 - sp) * f.alpha_m_plus)];
                    terms.extend((0..nm).map(|k| (d.pmp0 + k, -1.0)));
                    prog.le(&terms, 0.0);
                }
            }
            if sm < 1.0 {
                for (k, &cust) in red.active_n.iter().enumerate() {
                    let idx = dp
                        .partition
                        .noncoordinated
                        .iter()
                        .position(|&c| c == cust)
                        .expect("active customer belongs to partition");
                    let alpha = f.alpha_n_minus[idx];
                    if alpha > 0.0 {
                        prog.le(&[(d.fm, (1.0 - sm) * alpha), (pm0 + k, 1.0)], 0.0);
                    }
                }
                if nm > 0 && f.alpha_m_minus > 0.0 {
                    let mut terms: Terms = vec![(d.fm, (1.0 - sm) * f.alpha_m_minus)];
                    terms.extend((0..nm).map(|k| (d.pmm0 + k, 1.0)));
                    prog.le(&terms, 0.0);
                }
            }
        }
    }

    (prog, layout)
}

impl DesignProblem<'_> {
    /// Census of the conic program this problem generates.
    pub fn census(&self) -> Result<Census, SolveError> {
        let red = reduce(self)?;
        let (prog, layout) = assemble_conic(self, &red);
        let nm = layout.nm;
        let soc_blocks = if nm > 0 {
            let coupled = (0..red.kept.len())
                .filter(|&row| (0..nm).any(|k| red.a_m[(row, k)] != 0.0))
                .count();
            coupled + if layout.dir.is_some() { 2 } else { 0 }
        } else {
            0
        };
        let exp_blocks = layout.nm + layout.nn;
        Ok(Census {
            soc_blocks,
            exp_blocks,
            linear_rows: prog.rows() - soc_blocks * (nm + 1) - exp_blocks * 3,
            variables: prog.n_vars(),
            network_rows_kept: red.kept.len(),
            network_rows_dropped: red.dropped,
            directional: layout.dir.is_some(),
        })
    }
}

/// Max-slack feasibility probe at the flexible origin: maximizes the least
/// row slack over the setpoint box. A non-positive optimum pinpoints the
/// first blocking row.
fn slater_probe(dp: &DesignProblem, red: &Reduced) -> Result<DVector<f64>, SolveError> {
    let nq = red.q_customers.len();
    let mut prog = ConicProgram::new();
    let q0 = prog.add_vars(nq).start;
    let t = prog.add_vars(1).start;
    prog.add_objective(t, -1.0);
    for row in 0..red.kept.len() {
        let mut terms: Terms = vec![(t, 1.0)];
        for k in 0..nq {
            let b = red.b_q[(row, k)];
            if b != 0.0 {
                terms.push((q0 + k, b));
            }
        }
        prog.le(&terms, red.r0[row]);
    }
    for k in 0..nq {
        prog.le(&[(q0 + k, 1.0)], red.q_caps[k]);
        prog.le(&[(q0 + k, -1.0)], red.q_caps[k]);
    }
    // The slack is bounded by the device boxes even when no row binds.
    let cap_bound = red
        .caps_m
        .iter()
        .chain(red.caps_n.iter())
        .cloned()
        .fold(1.0f64, f64::max);
    prog.le(&[(t, 1.0)], 10.0 * cap_bound + 10.0);

    let settings = ConicSettings {
        tol: dp.opts.tol.max(1e-9),
        max_iter: dp.opts.max_iter,
        ..ConicSettings::default()
    };
    let sol = prog.solve(&settings)?;
    let slack = sol.x[t];
    if slack <= dp.opts.tol {
        // Identify the most binding row at the probe's setpoints.
        let q = DVector::from_iterator(nq, sol.x[q0..q0 + nq].iter().cloned());
        let mut worst = (f64::INFINITY, 0usize);
        for row in 0..red.kept.len() {
            let mut lhs = 0.0;
            for k in 0..nq {
                lhs += red.b_q[(row, k)] * q[k];
            }
            let margin = red.r0[row] - lhs;
            if margin < worst.0 {
                worst = (margin, red.kept[row]);
            }
        }
        return Err(SolveError::Infeasible {
            tag: format!("{:?}", dp.cs.tags()[worst.1]),
        });
    }
    Ok(DVector::from_iterator(
        nq,
        sol.x[q0..q0 + nq].iter().cloned(),
    ))
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Solve the design problem and report the envelope in kW.
pub fn solve(dp: &DesignProblem) -> Result<EnvelopeSolution, SolveError> {
    let red = reduce(dp)?;
    let probe_q = slater_probe(dp, &red)?;
    let base = dp.feeder.base_kva();
    let n = dp.feeder.n();
    let nm = red.active_m.len();
    let nn = red.active_n.len();

    if nm == 0 && nn == 0 {
        // Degenerate envelope: nothing flexible; setpoints from the probe.
        let mut q_kvar = DVector::zeros(n);
        for (k, &c) in red.q_customers.iter().enumerate() {
            q_kvar[dp.feeder.customers()[c].node] = probe_q[k] * base;
        }
        return Ok(EnvelopeSolution {
            coordinated: vec![],
            noncoordinated: vec![],
            pinned: red.pinned.clone(),
            w_kw: DMatrix::zeros(0, 0),
            center_kw: DVector::zeros(0),
            p_minus_kw: DVector::zeros(0),
            p_plus_kw: DVector::zeros(0),
            q_kvar,
            pm_plus_kw: DVector::zeros(0),
            pm_minus_kw: DVector::zeros(0),
            objective: 0.0,
            status: "Trivial".into(),
            iterations: 0,
            solve_time: 0.0,
            rows_kept: red.kept.len(),
            rows_dropped: red.dropped,
        });
    }

    let (prog, layout) = assemble_conic(dp, &red);
    // Retry ladder for borderline-conditioned instances: flip equilibration,
    // then add static regularization with a looser gap. Every accepted
    // solution still passes through the independent residual audit.
    let attempts = [
        ConicSettings {
            tol: dp.opts.tol,
            max_iter: dp.opts.max_iter,
            verbose: dp.opts.verbose,
            ..ConicSettings::default()
        },
        ConicSettings {
            tol: dp.opts.tol,
            max_iter: dp.opts.max_iter,
            verbose: dp.opts.verbose,
            equilibrate: false,
            ..ConicSettings::default()
        },
        ConicSettings {
            tol: dp.opts.tol.max(1e-7),
            max_iter: 2 * dp.opts.max_iter,
            verbose: dp.opts.verbose,
            static_reg_scale: 1e3,
            ..ConicSettings::default()
        },
    ];
    let mut conic = None;
    let mut last_err = None;
    for (attempt, settings) in attempts.iter().enumerate() {
        match prog.solve(settings) {
            Ok(mut s) => {
                if attempt > 0 {
                    s.status = format!("{} (attempt {})", s.status, attempt + 1);
                }
                conic = Some(s);
                break;
            }
            Err(ConicError::Infeasible) => {
                return Err(SolveError::Infeasible {
                    tag: "unidentified (conic stage)".into(),
                })
            }
            Err(ConicError::Unbounded) => {
                return Err(SolveError::Internal(
                    "design problem reported unbounded despite device boxes".into(),
                ))
            }
            Err(e) => last_err = Some(e),
        }
    }
    let conic = match conic {
        Some(c) => c,
        None => return Err(SolveError::Solver(last_err.expect("at least one attempt"))),
    };
    let x = &conic.x;

    // Recover L, then W = (L L^T)^(1/2).
    let mut l_mat = DMatrix::zeros(nm, nm);
    for i in 0..nm {
        for j in 0..=i {
            l_mat[(i, j)] = x[layout.l0 + tri(i, j)];
        }
    }
    let w_pu = sqrtm_psd(&(&l_mat * l_mat.transpose()));
    let center_pu = DVector::from_iterator(nm, x[layout.c0..layout.c0 + nm].iter().cloned());
    let p_plus_pu = DVector::from_iterator(nn, x[layout.pp0..layout.pp0 + nn].iter().cloned());
    let p_minus_pu = DVector::from_iterator(nn, x[layout.pm0..layout.pm0 + nn].iter().cloned());

    let mut q_kvar = DVector::zeros(n);
    for (k, &c) in red.q_customers.iter().enumerate() {
        q_kvar[dp.feeder.customers()[c].node] = x[layout.q0 + k] * base;
    }

    let (pm_plus_pu, pm_minus_pu) = match &layout.dir {
        Some(d) => (
            DVector::from_iterator(nm, x[d.pmp0..d.pmp0 + nm].iter().cloned()),
            DVector::from_iterator(nm, x[d.pmm0..d.pmm0 + nm].iter().cloned()),
        ),
        None => {
            // Ellipsoid points attaining the aggregate support values.
            let wt_ones = w_pu.transpose() * DVector::from_element(nm, 1.0);
            let norm = wt_ones.norm();
            if norm > 0.0 {
                let dir = &w_pu * (&wt_ones / norm);
                (&center_pu + &dir, &center_pu - &dir)
            } else {
                (center_pu.clone(), center_pu.clone())
            }
        }
    };

    // Objective in kW units, recomputed from the reported quantities.
    let mut objective = 0.0;
    if nm > 0 {
        let eig = (&w_pu * base).symmetric_eigen();
        for v in eig.eigenvalues.iter() {
            objective += v.max(f64::MIN_POSITIVE).ln();
        }
    }
    for k in 0..nn {
        objective += ((p_plus_pu[k] - p_minus_pu[k]) * base)
            .max(f64::MIN_POSITIVE)
            .ln();
    }

    let sol = EnvelopeSolution {
        coordinated: red.active_m.clone(),
        noncoordinated: red.active_n.clone(),
        pinned: red.pinned.clone(),
        w_kw: &w_pu * base,
        center_kw: &center_pu * base,
        p_minus_kw: &p_minus_pu * base,
        p_plus_kw: &p_plus_pu * base,
        q_kvar,
        pm_plus_kw: &pm_plus_pu * base,
        pm_minus_kw: &pm_minus_pu * base,
        objective,
        status: conic.status,
        iterations: conic.iterations,
        solve_time: conic.solve_time,
        rows_kept: red.kept.len(),
        rows_dropped: red.dropped,
    };

    if dp.opts.strict_origin {
        let origin_ok = residual_offsets_pu(dp, &sol)
            .iter()
            .all(|&b| b >= -10.0 * dp.opts.tol);
        if !origin_ok {
            return Err(SolveError::Internal(
                "strict origin check failed: residual polytope excludes the origin".into(),
            ));
        }
    }

    Ok(sol)
}

/// Residual offsets `b_res = r0 - B q - A_N+ P+ - A_N- P-` over the full row
/// set, per-unit. Nonnegative entries certify the origin stays published.
pub fn residual_offsets_pu(dp: &DesignProblem, sol: &EnvelopeSolution) -> DVector<f64> {
    let cs = dp.cs;
    let base = dp.feeder.base_kva();
    let q_pu = sol.q_kvar.map(|v| v / base);
    let mut rhs = cs.b_q(dp.uncertainty.s_fixed_nominal(), &q_pu);
    if !dp.uncertainty.is_nominal() {
        rhs -= row_tightenings(cs, &dp.uncertainty);
    }
    let customers = dp.feeder.customers();
    for row in 0..cs.rows() {
        let mut worst_n = 0.0;
        for (k, &c) in sol.noncoordinated.iter().enumerate() {
            let a = cs.a()[(row, customers[c].node)];
            if a > 0.0 {
                worst_n += a * sol.p_plus_kw[k] / base;
            } else if a < 0.0 {
                worst_n += a * sol.p_minus_kw[k] / base;
            }
        }
        rhs[row] -= worst_n;
    }
    rhs
}

/// Independent residual audit of a solution against the full constraint
/// system, by constraint family. All violations are reported in scaled
/// per-unit (positive means violated).
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub families: Vec<(String, f64)>,
    pub psd_defect: f64,
    pub worst: f64,
}

impl ResidualReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.worst <= tol && self.psd_defect <= tol
    }

    pub fn family(&self, name: &str) -> Option<f64> {
        self.families
            .iter()
            .find(|(f, _)| f == name)
            .map(|&(_, v)| v)
    }
}

pub fn verify_solution(dp: &DesignProblem, sol: &EnvelopeSolution) -> ResidualReport {
    let cs = dp.cs;
    let feeder = dp.feeder;
    let base = feeder.base_kva();
    let customers = feeder.customers();
    let nm = sol.coordinated.len();
    let nn = sol.noncoordinated.len();

    let w_pu = sol.w_kw.map(|v| v / base);
    let center_pu = sol.center_kw.map(|v| v / base);
    let p_plus_pu = sol.p_plus_kw.map(|v| v / base);
    let p_minus_pu = sol.p_minus_kw.map(|v| v / base);
    let pm_plus_pu = sol.pm_plus_kw.map(|v| v / base);
    let pm_minus_pu = sol.pm_minus_kw.map(|v| v / base);
    let q_pu = sol.q_kvar.map(|v| v / base);

    let mut rhs = cs.b_q(dp.uncertainty.s_fixed_nominal(), &q_pu);
    if !dp.uncertainty.is_nominal() {
        rhs -= row_tightenings(cs, &dp.uncertainty);
    }

    let mut worst_rows = f64::NEG_INFINITY;
    let mut worst_zero_rows = f64::NEG_INFINITY;
    let mut worst_dir_rows = f64::NEG_INFINITY;
    for row in 0..cs.rows() {
        let scale = rhs[row].abs().max(1.0);
        let a_m: Vec<f64> = sol
            .coordinated
            .iter()
            .map(|&c| cs.a()[(row, customers[c].node)])
            .collect();
        let mut n_part = 0.0;
        for (k, &c) in sol.noncoordinated.iter().enumerate() {
            let a = cs.a()[(row, customers[c].node)];
            if a > 0.0 {
                n_part += a * p_plus_pu[k];
            } else if a < 0.0 {
                n_part += a * p_minus_pu[k];
            }
        }
        let a_m_vec = DVector::from_vec(a_m);
        let w_norm = (&w_pu * &a_m_vec).norm();
        let m_part = a_m_vec.dot(&center_pu);
        worst_rows = worst_rows.max((w_norm + m_part + n_part - rhs[row]) / scale);
        worst_zero_rows = worst_zero_rows.max((n_part - rhs[row]) / scale);
        let dir_plus = a_m_vec.dot(&pm_plus_pu) + n_part - rhs[row];
        let dir_minus = a_m_vec.dot(&pm_minus_pu) + n_part - rhs[row];
        worst_dir_rows = worst_dir_rows.max(dir_plus.max(dir_minus) / scale);
    }

    let mut worst_sign = f64::NEG_INFINITY;
    for k in 0..nn {
        worst_sign = worst_sign.max(p_minus_pu[k]);
        worst_sign = worst_sign.max(-p_plus_pu[k]);
    }
    if nn == 0 {
        worst_sign = 0.0;
    }

    // Support dominance along the aggregate direction.
    let support_viol = if nm > 0 {
        let ones = DVector::from_element(nm, 1.0);
        let wt_norm = (w_pu.transpose() * &ones).norm();
        let up = (ones.dot(&center_pu) + wt_norm) - ones.dot(&pm_plus_pu);
        let dn = ones.dot(&pm_minus_pu) - (ones.dot(&center_pu) - wt_norm);
        up.max(dn)
    } else {
        0.0
    };

    // Fairness floors recomputed from scratch.
    let fair_viol = match &dp.fairness {
        Some(f) => {
            let f_plus: f64 = pm_plus_pu.sum() + p_plus_pu.sum();
            let f_minus: f64 = -pm_minus_pu.sum() - p_minus_pu.sum();
            let mut worst: f64 = 0.0;
            if f.sigma_plus < 1.0 {
                for (k, &cust) in sol.noncoordinated.iter().enumerate() {
                    let idx = dp
                        .partition
                        .noncoordinated
                        .iter()
                        .position(|&c| c == cust)
                        .unwrap();
                    worst = worst
                        .max((1.0 - f.sigma_plus) * f.alpha_n_plus[idx] * f_plus - p_plus_pu[k]);
                }
                if nm > 0 {
                    worst = worst
                        .max((1.0 - f.sigma_plus) * f.alpha_m_plus * f_plus - pm_plus_pu.sum());
                }
            }
            if f.sigma_minus < 1.0 {
                for (k, &cust) in sol.noncoordinated.iter().enumerate() {
                    let idx = dp
                        .partition
                        .noncoordinated
                        .iter()
                        .position(|&c| c == cust)
                        .unwrap();
                    worst = worst.max(
                        (1.0 - f.sigma_minus) * f.alpha_n_minus[idx] * f_minus + p_minus_pu[k],
                    );
                }
                if nm > 0 {
                    worst = worst
                        .max((1.0 - f.sigma_minus) * f.alpha_m_minus * f_minus + pm_minus_pu.sum());
                }
            }
            worst
        }
        None => 0.0,
    };

    // Setpoint box.
    let mut q_viol = f64::NEG_INFINITY;
    for node in 0..feeder.n() {
        let cap = feeder.customer_at(node).map(|c| c.q_max).unwrap_or(0.0);
        q_viol = q_viol.max(q_pu[node].abs() - cap);
    }

    // PSD defect of the published W, relative to its norm.
    let psd_defect = if nm > 0 {
        let eig = w_pu.clone().symmetric_eigen();
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let norm = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()))
            .max(1e-300);
        (-min / norm).max(0.0)
    } else {
        0.0
    };

    let families = vec![
        ("network-rows".to_string(), worst_rows),
        ("zero-containment-rows".to_string(), worst_zero_rows),
        ("zero-containment-signs".to_string(), worst_sign),
        ("directional-rows".to_string(), worst_dir_rows),
        ("support-dominance".to_string(), support_viol),
        ("fairness-floors".to_string(), fair_viol),
        ("setpoint-bounds".to_string(), q_viol),
    ];
    let worst = families
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    ResidualReport {
        families,
        psd_defect,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::assemble_feeder_system;
    use crate::feeder::{build_sensitivities, synth, Feeder};
    use approx::assert_abs_diff_eq;

    const BAND: (f64, f64) = (0.9025, 1.1025);

    fn setup(feeder: &Feeder, rho: usize) -> ConstraintSystem {
        let sens = build_sensitivities(feeder);
        assemble_feeder_system(feeder, &sens, BAND.0, BAND.1, rho).unwrap()
    }

    fn nominal(feeder: &Feeder) -> UncertaintyModel {
        UncertaintyModel::nominal(feeder.s_fixed())
    }

    fn equal_fairness(dp_noncoord: usize, sigma: f64) -> FairnessInputs {
        let share = 1.0 / (dp_noncoord as f64 + 1.0);
        FairnessInputs {
            alpha_m_plus: share,
            alpha_m_minus: share,
            alpha_n_plus: vec![share; dp_noncoord],
            alpha_n_minus: vec![share; dp_noncoord],
            sigma_plus: sigma,
            sigma_minus: sigma,
        }
    }

    #[test]
    fn single_noncoordinated_customer_hits_device_box() {
        let feeder = Feeder::from_doc(&synth::boxes_only(1, 5.0, 2.0)).unwrap();
        let cs = setup(&feeder, 2);
        let partition = Partition::new(&feeder, vec![]).unwrap();
        let dp = build_problem(
            &cs,
            &feeder,
            partition,
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        assert_eq!(sol.noncoordinated.len(), 1);
        assert_abs_diff_eq!(sol.p_plus_kw[0], 5.0, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.p_minus_kw[0], -5.0, epsilon = 1e-4);
        assert!(verify_solution(&dp, &sol).ok(1e-6));
    }

    #[test]
    fn two_coordinated_boxes_give_inscribed_disc() {
        let feeder = Feeder::from_doc(&synth::boxes_only(2, 5.0, 2.0)).unwrap();
        let cs = setup(&feeder, 2);
        let partition = Partition::new(&feeder, vec![0, 1]).unwrap();
        let dp = build_problem(
            &cs,
            &feeder,
            partition,
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        assert_eq!(sol.coordinated.len(), 2);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 5.0 } else { 0.0 };
                assert_abs_diff_eq!(sol.w_kw[(i, j)], expect, epsilon = 1e-4);
            }
            assert_abs_diff_eq!(sol.center_kw[i], 0.0, epsilon = 1e-4);
        }
        let det = sol.w_kw[(0, 0)] * sol.w_kw[(1, 1)] - sol.w_kw[(0, 1)] * sol.w_kw[(1, 0)];
        assert_abs_diff_eq!(det, 25.0, epsilon = 1e-3);
    }

    #[test]
    fn branched_feeder_solution_verifies() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let partition = Partition::new(&feeder, vec![0]).unwrap();
        let um = UncertaintyModel::proportional(feeder.s_fixed(), 0.3, 2.0, true).unwrap();
        let fairness = Some(equal_fairness(2, 0.5));
        let opts = SolverOptions {
            strict_origin: true,
            ..SolverOptions::default()
        };
        let dp = build_problem(&cs, &feeder, partition, um, fairness, opts).unwrap();
        let sol = solve(&dp).unwrap();
        let report = verify_solution(&dp, &sol);
        assert!(report.ok(1e-6), "residuals: {:?}", report);
        let offsets = residual_offsets_pu(&dp, &sol);
        assert!(offsets.iter().all(|&b| b >= -1e-7));
    }

    #[test]
    fn objective_monotone_in_gamma() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let mut objectives = Vec::new();
        for gamma in [0.0, 2.0, 6.0] {
            let um = UncertaintyModel::proportional(feeder.s_fixed(), 0.5, gamma, true).unwrap();
            let dp = build_problem(
                &cs,
                &feeder,
                Partition::new(&feeder, vec![0]).unwrap(),
                um,
                None,
                SolverOptions::default(),
            )
            .unwrap();
            objectives.push(solve(&dp).unwrap().objective);
        }
        assert!(objectives[0] >= objectives[1] - 1e-7);
        assert!(objectives[1] >= objectives[2] - 1e-7);
    }

    #[test]
    fn objective_monotone_in_sigma() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let mut objectives = Vec::new();
        for sigma in [1.0, 0.3, 0.0] {
            // Uneven weights so the fairness floor actually binds.
            let fairness = FairnessInputs {
                alpha_m_plus: 0.6,
                alpha_m_minus: 0.6,
                alpha_n_plus: vec![0.3, 0.1],
                alpha_n_minus: vec![0.3, 0.1],
                sigma_plus: sigma,
                sigma_minus: sigma,
            };
            let dp = build_problem(
                &cs,
                &feeder,
                Partition::new(&feeder, vec![0]).unwrap(),
                nominal(&feeder),
                Some(fairness),
                SolverOptions::default(),
            )
            .unwrap();
            objectives.push(solve(&dp).unwrap().objective);
        }
        assert!(objectives[0] >= objectives[1] - 1e-7);
        assert!(objectives[1] >= objectives[2] - 1e-7);
    }

    #[test]
    fn scale_covariance_in_device_limits() {
        // Doubling every device limit doubles the envelope and raises the
        // objective by (n_M + n_N) ln 2.
        let mut objectives = Vec::new();
        for scale in [1.0f64, 2.0] {
            let feeder = Feeder::from_doc(&synth::boxes_only(2, 2.0 * scale, 1.0 * scale)).unwrap();
            let cs = setup(&feeder, 2);
            let dp = build_problem(
                &cs,
                &feeder,
                Partition::new(&feeder, vec![0]).unwrap(),
                nominal(&feeder),
                None,
                SolverOptions::default(),
            )
            .unwrap();
            objectives.push(solve(&dp).unwrap().objective);
        }
        assert_abs_diff_eq!(
            objectives[1] - objectives[0],
            2.0 * 2.0f64.ln(),
            epsilon = 1e-4
        );
    }

    #[test]
    fn census_reduces_when_fairness_inactive() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 4);
        let um = nominal(&feeder);
        let plain = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0]).unwrap(),
            um.clone(),
            None,
            SolverOptions::default(),
        )
        .unwrap()
        .census()
        .unwrap();
        let sigma_one = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0]).unwrap(),
            um.clone(),
            Some(equal_fairness(2, 1.0)),
            SolverOptions::default(),
        )
        .unwrap()
        .census()
        .unwrap();
        assert_eq!(plain, sigma_one);
        assert!(!plain.directional);

        let opts = SolverOptions {
            force_directional: true,
            ..SolverOptions::default()
        };
        let forced = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0]).unwrap(),
            um,
            Some(equal_fairness(2, 1.0)),
            opts,
        )
        .unwrap()
        .census()
        .unwrap();
        assert!(forced.directional);
        assert!(forced.variables > plain.variables);
    }

    #[test]
    fn directional_machinery_is_objective_neutral() {
        for seed in [11u64, 29] {
            let doc = synth::random_radial(seed, 8, 0.8);
            let feeder = Feeder::from_doc(&doc).unwrap();
            let cs = setup(&feeder, 4);
            let n_cust = feeder.customers().len();
            let coordinated: Vec<usize> = (0..n_cust / 2).collect();
            let nn = n_cust - coordinated.len();

            let plain = build_problem(
                &cs,
                &feeder,
                Partition::new(&feeder, coordinated.clone()).unwrap(),
                nominal(&feeder),
                None,
                SolverOptions::default(),
            )
            .unwrap();
            let base_obj = solve(&plain).unwrap().objective;

            let opts = SolverOptions {
                force_directional: true,
                ..SolverOptions::default()
            };
            let um = UncertaintyModel::proportional(feeder.s_fixed(), 0.3, 0.0, true).unwrap();
            let full = build_problem(
                &cs,
                &feeder,
                Partition::new(&feeder, coordinated).unwrap(),
                um,
                Some(equal_fairness(nn, 1.0)),
                opts,
            )
            .unwrap();
            let full_obj = solve(&full).unwrap().objective;
            let rel = (full_obj - base_obj).abs() / base_obj.abs().max(1.0);
            assert!(rel < 1e-5, "seed {seed}: {base_obj} vs {full_obj}");
        }
    }

    #[test]
    fn perturbed_w_is_detected() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0, 1]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let mut sol = solve(&dp).unwrap();
        assert!(verify_solution(&dp, &sol).ok(1e-6));

        // Inflate the top eigenvalue of W by 10%.
        let eig = sol.w_kw.clone().symmetric_eigen();
        let mut vals = eig.eigenvalues.clone();
        let top = vals.imax();
        vals[top] *= 1.1;
        sol.w_kw = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let report = verify_solution(&dp, &sol);
        assert!(
            report.family("network-rows").unwrap() > 1e-6,
            "perturbation went unnoticed: {report:?}"
        );
    }

    #[test]
    fn negative_export_bound_is_flagged() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let mut sol = solve(&dp).unwrap();
        sol.p_plus_kw[0] = -0.1;
        let report = verify_solution(&dp, &sol);
        assert!(report.family("zero-containment-signs").unwrap() > 1e-6);
    }

    #[test]
    fn degenerate_partitions() {
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        // Pure interval problem.
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        assert_eq!(sol.coordinated.len(), 0);
        assert_eq!(sol.w_kw.nrows(), 0);
        assert_eq!(sol.noncoordinated.len(), 3);
        assert!(verify_solution(&dp, &sol).ok(1e-6));

        // Pure ellipsoid problem.
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0, 1, 2]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        assert_eq!(sol.coordinated.len(), 3);
        assert_eq!(sol.noncoordinated.len(), 0);
        assert!(verify_solution(&dp, &sol).ok(1e-6));
    }

    #[test]
    fn zero_limit_customer_is_pinned() {
        let mut doc = synth::boxes_only(3, 5.0, 2.0);
        doc.customers[1].p_max_kw = 0.0;
        let feeder = Feeder::from_doc(&doc).unwrap();
        let cs = setup(&feeder, 2);
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        assert_eq!(sol.pinned, vec![1]);
        assert_eq!(sol.coordinated, vec![0]);
        assert_eq!(sol.noncoordinated, vec![2]);
        assert!(sol.objective.is_finite());
    }

    #[test]
    fn infeasible_fixed_load_names_the_row() {
        // 60 kW of fixed draw through 0.2 pu of resistance breaks the lower
        // voltage bound before any flexibility is allocated.
        let mut doc = synth::two_bus(0.1, 0.01, 5.0, 2.0);
        doc.customers[0].p_fixed_kw = -60.0;
        let feeder = Feeder::from_doc(&doc).unwrap();
        let cs = setup(&feeder, 8);
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        match solve(&dp) {
            Err(SolveError::Infeasible { tag }) => {
                assert!(tag.contains("VoltageLower"), "unexpected tag {tag}");
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn sampled_envelope_points_satisfy_full_system() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let feeder = synth::branched_test_feeder();
        let cs = setup(&feeder, 8);
        let dp = build_problem(
            &cs,
            &feeder,
            Partition::new(&feeder, vec![0, 2]).unwrap(),
            nominal(&feeder),
            None,
            SolverOptions::default(),
        )
        .unwrap();
        let sol = solve(&dp).unwrap();
        let base = feeder.base_kva();
        let rhs = {
            let q_pu = sol.q_kvar.map(|v| v / base);
            cs.b_q(dp.uncertainty.s_fixed_nominal(), &q_pu)
        };

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let nm = sol.coordinated.len();
        for _ in 0..2000 {
            // Ellipsoid point (uniform direction, random radius) plus a
            // random box choice for the non-coordinated customers.
            let mut u = DVector::from_fn(nm, |_, _| rng.gen_range(-1.0..1.0f64));
            if u.norm() > 0.0 {
                let r: f64 = rng.gen_range(0.0..=1.0);
                u = u.normalize() * r;
            }
            let pm = (&sol.w_kw * &u + &sol.center_kw) / base;
            let mut p = DVector::zeros(feeder.n());
            for (k, &c) in sol.coordinated.iter().enumerate() {
                p[feeder.customers()[c].node] = pm[k];
            }
            for (k, &c) in sol.noncoordinated.iter().enumerate() {
                let lo = sol.p_minus_kw[k] / base;
                let hi = sol.p_plus_kw[k] / base;
                p[feeder.customers()[c].node] = if rng.gen_bool(0.5) {
                    if rng.gen_bool(0.5) {
                        hi
                    } else {
                        lo
                    }
                } else {
                    rng.gen_range(lo..=hi)
                };
            }
            let lhs = cs.a() * &p;
            for row in 0..cs.rows() {
                assert!(
                    lhs[row] <= rhs[row] + 1e-6,
                    "row {row} violated: {} > {}",
                    lhs[row],
                    rhs[row]
                );
            }
        }
    }
}
