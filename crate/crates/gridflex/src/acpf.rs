//! Nonlinear validation of designed envelopes.
//!
//! A backward/forward sweep solves the AC power flow of the radial feeder
//! exactly (fixed point on complex voltages). Envelope-admissible injections
//! are sampled at box corners, at LP-extreme points of the coordinated
//! polytope aligned with the per-node voltage and per-line flow objectives,
//! and uniformly in the interior; the report records attained voltage and
//! loading extrema without ever enforcing them.

use nalgebra::{Complex, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conic::{solve_lp, ConicSettings};
use crate::feeder::{Feeder, Sensitivities};
use crate::geometry::{chebyshev_center, Polytope};
use crate::solver::{DesignProblem, EnvelopeSolution};

const SWEEP_TOL: f64 = 1e-9;
const SWEEP_CAP: usize = 100;

#[derive(Debug, Clone)]
pub struct PowerFlow {
    /// Squared voltage magnitudes per node, pu^2.
    pub v_mag2: DVector<f64>,
    /// Sending-end apparent flow per line, pu.
    pub flows: Vec<Complex<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Backward/forward sweep at the given net nodal injections (pu, positive =
/// export). Non-convergence is flagged, not fatal.
pub fn ac_power_flow(feeder: &Feeder, p: &DVector<f64>, q: &DVector<f64>) -> PowerFlow {
    let n = feeder.n();
    assert_eq!(p.len(), n);
    assert_eq!(q.len(), n);
    let v_slack = Complex::new(feeder.v0().sqrt(), 0.0);

    // Children lists and a depth-descending order for the backward pass.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut roots = Vec::new();
    for node in 0..n {
        match feeder.parent(node) {
            Some(parent) => children[parent].push(node),
            None => roots.push(node),
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = roots.clone();
    while let Some(v) = stack.pop() {
        order.push(v);
        stack.extend(children[v].iter().copied());
    }

    let mut voltage = vec![v_slack; n];
    let mut branch_current = vec![Complex::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < SWEEP_CAP {
        iterations += 1;
        // Backward: accumulate currents from the leaves toward the slack.
        for &node in order.iter().rev() {
            let s_inj = Complex::new(p[node], q[node]);
            let draw = -(s_inj / voltage[node]).conj();
            let mut total = draw;
            for &child in &children[node] {
                total += branch_current[child];
            }
            branch_current[node] = total;
        }
        // Forward: update voltages from the slack outward.
        let mut worst = 0.0f64;
        for &node in &order {
            let upstream = match feeder.parent(node) {
                Some(parent) => voltage[parent],
                None => v_slack,
            };
            let line = &feeder.lines()[node];
            let z = Complex::new(line.r, line.x);
            let next = upstream - z * branch_current[node];
            worst = worst.max((next - voltage[node]).norm());
            voltage[node] = next;
        }
        if worst < SWEEP_TOL {
            converged = true;
            break;
        }
    }

    let v_mag2 = DVector::from_fn(n, |i, _| voltage[i].norm_sqr());
    let flows = (0..n)
        .map(|node| {
            let upstream = match feeder.parent(node) {
                Some(parent) => voltage[parent],
                None => v_slack,
            };
            upstream * branch_current[node].conj()
        })
        .collect();
    PowerFlow {
        v_mag2,
        flows,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StressOptions {
    /// Uniform interior samples drawn from the joint envelope.
    pub interior: usize,
    /// Random corners when full enumeration is too large.
    pub random_corners: usize,
    /// Also sweep reactive setpoints to their corners during sampling.
    pub q_adversarial: bool,
}

impl Default for StressOptions {
    fn default() -> Self {
        StressOptions {
            interior: 200,
            random_corners: 256,
            q_adversarial: false,
        }
    }
}

/// One envelope-admissible operating choice: flexible active injections
/// and flexible reactive setpoints, per node, pu.
#[derive(Debug, Clone)]
pub struct StressSample {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// Envelope-admissible injection samples. Corner enumeration covers the
/// non-coordinated box, LP extremes track the per-node voltage and per-line
/// flow objectives of the linear model, and the rest is uniform interior.
/// Reactive setpoints stay at the solution's values unless `q_adversarial`
/// also sweeps them to their corners.
pub fn stress_sample(
    dp: &DesignProblem,
    sens: &Sensitivities,
    sol: &EnvelopeSolution,
    poly: &Polytope,
    opts: &StressOptions,
    seed: u64,
) -> Vec<StressSample> {
    let feeder = dp.feeder;
    let base = feeder.base_kva();
    let n = feeder.n();
    let nn = sol.noncoordinated.len();
    let nm = sol.coordinated.len();
    let customers = feeder.customers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let p_lo: Vec<f64> = (0..nn).map(|k| sol.p_minus_kw[k] / base).collect();
    let p_hi: Vec<f64> = (0..nn).map(|k| sol.p_plus_kw[k] / base).collect();
    let center_pu: DVector<f64> = sol.center_kw.map(|v| v / base);

    // Polytope in pu coordinates (offsets were published in kW).
    let poly_pu = Polytope::new(poly.facets().clone(), poly.offsets().map(|v| v / base));

    let q_set = sol.q_kvar.map(|v| v / base);
    let assemble = |pm: &DVector<f64>, pn: &[f64]| -> StressSample {
        let mut p = DVector::zeros(n);
        for (k, &c) in sol.coordinated.iter().enumerate() {
            p[customers[c].node] = pm[k];
        }
        for (k, &c) in sol.noncoordinated.iter().enumerate() {
            p[customers[c].node] = pn[k];
        }
        StressSample {
            p,
            q: q_set.clone(),
        }
    };

    let mut samples = Vec::new();

    // (i) box corners, coordinated part at the ellipsoid center.
    if nn <= 12 {
        for mask in 0u32..(1u32 << nn) {
            let corner: Vec<f64> = (0..nn)
                .map(|k| {
                    if mask & (1 << k) != 0 {
                        p_hi[k]
                    } else {
                        p_lo[k]
                    }
                })
                .collect();
            samples.push(assemble(&center_pu, &corner));
        }
    } else {
        for _ in 0..opts.random_corners {
            let corner: Vec<f64> = (0..nn)
                .map(|k| if rng.gen_bool(0.5) { p_hi[k] } else { p_lo[k] })
                .collect();
            samples.push(assemble(&center_pu, &corner));
        }
    }

    // (ii) joint LP-extreme directions: rows of +/-R (node voltages) and
    // +/-M (line flows) restricted to customer columns.
    let lp_settings = ConicSettings::default();
    let push_direction = |dir_nodes: &DVector<f64>, samples: &mut Vec<StressSample>| {
        let corner: Vec<f64> = (0..nn)
            .map(|k| {
                let d = dir_nodes[customers[sol.noncoordinated[k]].node];
                if d >= 0.0 {
                    p_hi[k]
                } else {
                    p_lo[k]
                }
            })
            .collect();
        let pm = if nm > 0 {
            let obj = DVector::from_fn(nm, |k, _| -dir_nodes[customers[sol.coordinated[k]].node]);
            match solve_lp(
                &obj,
                poly_pu.facets(),
                poly_pu.offsets(),
                None,
                &lp_settings,
            ) {
                Ok(lp) => lp.x,
                Err(_) => center_pu.clone(),
            }
        } else {
            DVector::zeros(0)
        };
        samples.push(assemble(&pm, &corner));
    };
    for row in 0..n {
        let r_row = sens.r().row(row).transpose();
        push_direction(&r_row, &mut samples);
        push_direction(&(-&r_row), &mut samples);
        let m_row = sens.m().row(row).transpose();
        push_direction(&m_row, &mut samples);
        push_direction(&(-&m_row), &mut samples);
    }

    // (iii) uniform interior: hit-and-run walk in the polytope, uniform in
    // the boxes.
    if opts.interior > 0 && (nm + nn) > 0 {
        let mut walker = match chebyshev_center(&poly_pu) {
            Ok((c, r)) if nm > 0 && r >= 0.0 => c,
            _ => center_pu.clone(),
        };
        for _ in 0..opts.interior {
            if nm > 0 {
                for _ in 0..(5 * nm).max(10) {
                    hit_and_run_in_polytope(&poly_pu, &mut walker, &mut rng);
                }
            }
            let pn: Vec<f64> = (0..nn)
                .map(|k| {
                    if p_hi[k] > p_lo[k] {
                        rng.gen_range(p_lo[k]..=p_hi[k])
                    } else {
                        p_lo[k]
                    }
                })
                .collect();
            samples.push(assemble(&walker, &pn));
        }
    }

    // Optional reactive corner sweep: replay every sample with the customer
    // setpoints pushed to +/-q_max. These deliberately leave the optimized
    // setpoints to probe how far deviant reactive dispatch could move the
    // network.
    if opts.q_adversarial {
        let mut q_hi = DVector::zeros(n);
        for c in customers {
            q_hi[c.node] = c.q_max;
        }
        let q_lo = -&q_hi;
        let mut extra = Vec::with_capacity(2 * samples.len());
        for sample in &samples {
            extra.push(StressSample {
                p: sample.p.clone(),
                q: q_hi.clone(),
            });
            extra.push(StressSample {
                p: sample.p.clone(),
                q: q_lo.clone(),
            });
        }
        samples.extend(extra);
    }

    samples
}

fn hit_and_run_in_polytope(poly: &Polytope, x: &mut DVector<f64>, rng: &mut ChaCha8Rng) {
    let n = poly.dim();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        d[i] = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let norm = d.norm();
    if norm == 0.0 {
        return;
    }
    d /= norm;
    let fd = poly.facets() * &d;
    let slack = poly.offsets() - poly.facets() * &*x;
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for i in 0..fd.len() {
        if fd[i] > 1e-300 {
            t_hi = t_hi.min(slack[i] / fd[i]);
        } else if fd[i] < -1e-300 {
            t_lo = t_lo.max(slack[i] / fd[i]);
        }
    }
    if t_hi <= t_lo || !t_lo.is_finite() || !t_hi.is_finite() {
        return;
    }
    *x += d * rng.gen_range(t_lo..=t_hi);
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeStress {
    pub node: String,
    /// Attained voltage magnitude extremes, pu.
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LineStress {
    pub from: String,
    pub to: String,
    /// Max apparent loading as a fraction of the rating.
    pub max_loading: f64,
    pub rating_kva: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StressReport {
    pub nodes: Vec<NodeStress>,
    pub lines: Vec<LineStress>,
    pub samples: usize,
    pub non_converged: usize,
    pub worst_overvoltage_pu: f64,
    pub worst_undervoltage_pu: f64,
    pub worst_loading: f64,
    /// Median |v_ac - v_lin| over all samples and nodes, pu magnitude.
    pub median_abs_dv_pu: f64,
    pub max_abs_dv_pu: f64,
}

/// Run the nonlinear power flow over the samples and aggregate extrema.
/// Voltage and thermal limits are observed quantities here, never enforced.
pub fn stress_report(
    feeder: &Feeder,
    sens: &Sensitivities,
    samples: &[StressSample],
) -> StressReport {
    let n = feeder.n();
    let base = feeder.base_kva();
    let mut p_fixed = DVector::zeros(n);
    let mut q_fixed = DVector::zeros(n);
    for c in feeder.customers() {
        p_fixed[c.node] = c.p_fixed;
        q_fixed[c.node] = c.q_fixed;
    }

    let mut v_min = DVector::from_element(n, f64::INFINITY);
    let mut v_max = DVector::from_element(n, f64::NEG_INFINITY);
    let mut loading = DVector::from_element(n, 0.0f64);
    let mut non_converged = 0usize;
    let mut dv_samples: Vec<f64> = Vec::with_capacity(samples.len() * n);

    for sample in samples {
        let p_total = &p_fixed + &sample.p;
        let q_total = &q_fixed + &sample.q;
        let pf = ac_power_flow(feeder, &p_total, &q_total);
        if !pf.converged {
            non_converged += 1;
            continue;
        }
        let v_lin = sens.voltages(&p_total, &q_total);
        for node in 0..n {
            let vm = pf.v_mag2[node].sqrt();
            v_min[node] = v_min[node].min(vm);
            v_max[node] = v_max[node].max(vm);
            dv_samples.push((vm - v_lin[node].max(0.0).sqrt()).abs());
        }
        for line in 0..n {
            let frac = pf.flows[line].norm() / feeder.lines()[line].s_max;
            loading[line] = loading[line].max(frac);
        }
    }

    dv_samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_abs_dv_pu = if dv_samples.is_empty() {
        0.0
    } else {
        dv_samples[dv_samples.len() / 2]
    };
    let max_abs_dv_pu = dv_samples.last().copied().unwrap_or(0.0);

    let nodes = (0..n)
        .map(|i| NodeStress {
            node: feeder.node_id(i).to_string(),
            v_min: v_min[i],
            v_max: v_max[i],
        })
        .collect();
    let lines = (0..n)
        .map(|i| {
            let line = &feeder.lines()[i];
            LineStress {
                from: match line.from {
                    Some(p) => feeder.node_id(p).to_string(),
                    None => feeder.slack_id().to_string(),
                },
                to: feeder.node_id(line.to).to_string(),
                max_loading: loading[i],
                rating_kva: line.s_max * base,
            }
        })
        .collect();

    StressReport {
        nodes,
        lines,
        samples: samples.len(),
        non_converged,
        worst_overvoltage_pu: v_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        worst_undervoltage_pu: v_min.iter().cloned().fold(f64::INFINITY, f64::min),
        worst_loading: loading.iter().cloned().fold(0.0, f64::max),
        median_abs_dv_pu,
        max_abs_dv_pu,
    }
}
