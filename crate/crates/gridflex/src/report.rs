//! Scenario orchestration and report documents.
//!
//! `run_solve` executes one scenario end to end: constraint assembly, the
//! envelope design solve, an independent residual audit, the published
//! residual polytope, volumes, aggregate ranges, fairness metrics, and the
//! nonlinear stress report. `run_sweep` drives the coordination share,
//! uncertainty grid, and fairness grids over a work pool. Reports are JSON
//! plus flat CSV tables; identical configs and seeds reproduce them
//! byte-for-byte (wall-clock timings go to a separate file).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::acpf::{stress_report, stress_sample, StressOptions, StressReport};
use crate::constraints::assemble_feeder_system;
use crate::fairness::{
    gini, normalize_weights, solver_inputs, weight_normalized_allocations, Participant,
};
use crate::feeder::{build_sensitivities, Feeder};
use crate::geometry::{aggregate_range, residual_polytope, volume_estimate, Polytope};
use crate::scenario::{
    cell_stream, fairness_for_partition, materialize_feeder, materialize_feeder_with,
    partition_at_size, partitions, uncertainty_model, ScenarioConfig, ScenarioError, SeedDomain,
};
use crate::solver::{
    build_problem, solve, verify_solution, EnvelopeSolution, Partition, ResidualReport,
};

#[derive(Debug, Clone, Serialize)]
pub struct FeederSummary {
    pub nodes: usize,
    pub lines: usize,
    pub customers: usize,
    pub base_kva: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalDoc {
    pub node: String,
    pub p_minus_kw: f64,
    pub p_plus_kw: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SetpointDoc {
    pub node: String,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionDoc {
    pub status: String,
    pub objective: f64,
    pub iterations: u32,
    pub coordinated: Vec<String>,
    pub w_kw: Vec<Vec<f64>>,
    pub center_kw: Vec<f64>,
    pub noncoordinated: Vec<IntervalDoc>,
    pub pinned: Vec<String>,
    pub q_setpoints: Vec<SetpointDoc>,
    pub pm_plus_kw: Vec<f64>,
    pub pm_minus_kw: Vec<f64>,
    pub residuals: ResidualReport,
    pub rows_kept: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolytopeDoc {
    pub members: Vec<String>,
    pub facets: Vec<Vec<f64>>,
    pub offsets_kw: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumesDoc {
    pub coordinated_kw: f64,
    pub coordinated_stderr: f64,
    pub noncoordinated_kw: f64,
    pub n_active: usize,
    pub geometric_mean_kw: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RangeDoc {
    pub min_kw: f64,
    pub max_kw: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FairnessDoc {
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub allocations: Vec<AllocationDoc>,
    pub gini: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationDoc {
    pub participant: String,
    pub x_kw_per_weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub seed: u64,
    pub nominal_problem: bool,
    pub feeder: FeederSummary,
    pub solution: SolutionDoc,
    pub residual_polytope: PolytopeDoc,
    pub volumes: VolumesDoc,
    pub aggregate_range_kw: RangeDoc,
    pub fairness: Option<FairnessDoc>,
    pub stress: StressReport,
    pub config: ScenarioConfig,
}

fn feeder_summary(feeder: &Feeder) -> FeederSummary {
    FeederSummary {
        nodes: feeder.n(),
        lines: feeder.lines().len(),
        customers: feeder.customers().len(),
        base_kva: feeder.base_kva(),
    }
}

fn solution_doc(feeder: &Feeder, sol: &EnvelopeSolution, residuals: ResidualReport) -> SolutionDoc {
    let node_of = |cust: usize| feeder.node_id(feeder.customers()[cust].node).to_string();
    SolutionDoc {
        status: sol.status.clone(),
        objective: sol.objective,
        iterations: sol.iterations,
        coordinated: sol.coordinated.iter().map(|&c| node_of(c)).collect(),
        w_kw: (0..sol.w_kw.nrows())
            .map(|i| sol.w_kw.row(i).iter().cloned().collect())
            .collect(),
        center_kw: sol.center_kw.iter().cloned().collect(),
        noncoordinated: sol
            .noncoordinated
            .iter()
            .enumerate()
            .map(|(k, &c)| IntervalDoc {
                node: node_of(c),
                p_minus_kw: sol.p_minus_kw[k],
                p_plus_kw: sol.p_plus_kw[k],
            })
            .collect(),
        pinned: sol.pinned.iter().map(|&c| node_of(c)).collect(),
        q_setpoints: feeder
            .customers()
            .iter()
            .map(|c| SetpointDoc {
                node: feeder.node_id(c.node).to_string(),
                q_kvar: sol.q_kvar[c.node],
            })
            .collect(),
        pm_plus_kw: sol.pm_plus_kw.iter().cloned().collect(),
        pm_minus_kw: sol.pm_minus_kw.iter().cloned().collect(),
        residuals,
        rows_kept: sol.rows_kept,
        rows_dropped: sol.rows_dropped,
    }
}

fn boxes_kw(sol: &EnvelopeSolution) -> Vec<(f64, f64)> {
    (0..sol.noncoordinated.len())
        .map(|k| (sol.p_minus_kw[k], sol.p_plus_kw[k]))
        .collect()
}

/// Aggregate injection range of the joint envelope in kW.
fn joint_range(sol: &EnvelopeSolution, poly: &Polytope) -> Result<(f64, f64), ScenarioError> {
    let poly_opt = (!sol.coordinated.is_empty()).then_some(poly);
    aggregate_range(poly_opt, &boxes_kw(sol))
        .map_err(|e| ScenarioError::Invalid(format!("aggregate range failed: {e}")))
}

fn volumes_doc(
    sol: &EnvelopeSolution,
    poly: &Polytope,
    budget: usize,
    seed: u64,
) -> Result<VolumesDoc, ScenarioError> {
    let (vol_m, stderr) = if sol.coordinated.is_empty() {
        (1.0, 0.0)
    } else {
        let est = volume_estimate(poly, budget, seed)
            .map_err(|e| ScenarioError::Invalid(format!("volume estimate failed: {e}")))?;
        (est.volume, est.stderr)
    };
    let vol_n: f64 = (0..sol.noncoordinated.len())
        .map(|k| (sol.p_plus_kw[k] - sol.p_minus_kw[k]).max(0.0))
        .product();
    let n_active = sol.n_active();
    let geometric_mean = if n_active == 0 {
        0.0
    } else {
        crate::geometry::geometric_mean_size(vol_m, vol_n, n_active)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?
    };
    Ok(VolumesDoc {
        coordinated_kw: vol_m,
        coordinated_stderr: stderr,
        noncoordinated_kw: vol_n,
        n_active,
        geometric_mean_kw: geometric_mean,
    })
}

fn fairness_doc(
    config: &ScenarioConfig,
    feeder: &Feeder,
    partition: &Partition,
    sol: &EnvelopeSolution,
    sigma_override: Option<f64>,
) -> Result<Option<FairnessDoc>, ScenarioError> {
    let Some(fc) = fairness_for_partition(config, feeder, partition, sigma_override)? else {
        return Ok(None);
    };
    let alphas = normalize_weights(&fc).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let allocations = weight_normalized_allocations(sol, &alphas, partition)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let x: Vec<f64> = allocations.iter().map(|&(_, v)| v).collect();
    let gini_value = gini(&x).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let allocations = allocations
        .into_iter()
        .map(|(p, v)| AllocationDoc {
            participant: match p {
                Participant::Group => "coordinated-group".to_string(),
                Participant::Customer { customer } => feeder
                    .node_id(feeder.customers()[customer].node)
                    .to_string(),
            },
            x_kw_per_weight: v,
        })
        .collect();
    Ok(Some(FairnessDoc {
        sigma_plus: fc.sigma_plus,
        sigma_minus: fc.sigma_minus,
        allocations,
        gini: gini_value,
    }))
}

/// Solve one scenario and assemble the full report document.
pub fn run_solve(config: &ScenarioConfig, base_dir: &Path) -> Result<SolveReport, ScenarioError> {
    let feeder = materialize_feeder(config, base_dir)?;
    let sens = build_sensitivities(&feeder);
    let (v_min, v_max) = config.voltage.bounds();
    let cs = assemble_feeder_system(&feeder, &sens, v_min, v_max, config.thermal.rho)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let partition = partitions(config, &feeder)?
        .into_iter()
        .next()
        .ok_or_else(|| ScenarioError::Invalid("no partition trials configured".into()))?;
    let um = uncertainty_model(
        &feeder,
        config.uncertainty.eta,
        config.uncertainty.gamma,
        config.uncertainty.include_q,
    )?;
    let fairness = match fairness_for_partition(config, &feeder, &partition, None)? {
        Some(fc) => Some(solver_inputs(&fc).map_err(|e| ScenarioError::Invalid(e.to_string()))?),
        None => None,
    };
    let dp = build_problem(
        &cs,
        &feeder,
        partition.clone(),
        um,
        fairness,
        config.solver.options(),
    )?;
    let sol = solve(&dp)?;
    let residuals = verify_solution(&dp, &sol);
    let poly = residual_polytope(&dp, &sol)
        .map_err(|e| ScenarioError::Invalid(format!("residual polytope: {e}")))?;

    let volumes = volumes_doc(
        &sol,
        &poly,
        config.volume.budget,
        substream_seed(config.seed, SeedDomain::Volume),
    )?;
    let (range_min, range_max) = joint_range(&sol, &poly)?;
    let fairness = fairness_doc(config, &feeder, &partition, &sol, None)?;

    let stress_opts = StressOptions {
        interior: config.stress.interior,
        random_corners: config.stress.random_corners,
        q_adversarial: config.stress.q_adversarial,
    };
    let samples = stress_sample(
        &dp,
        &sens,
        &sol,
        &poly,
        &stress_opts,
        substream_seed(config.seed, SeedDomain::Stress),
    );
    let stress = stress_report(&feeder, &sens, &samples);

    Ok(SolveReport {
        seed: config.seed,
        nominal_problem: config.is_nominal(),
        feeder: feeder_summary(&feeder),
        solution: solution_doc(&feeder, &sol, residuals),
        residual_polytope: PolytopeDoc {
            members: sol
                .coordinated
                .iter()
                .map(|&c| feeder.node_id(feeder.customers()[c].node).to_string())
                .collect(),
            facets: (0..poly.facets().nrows())
                .map(|i| poly.facets().row(i).iter().cloned().collect())
                .collect(),
            offsets_kw: poly.offsets().iter().cloned().collect(),
        },
        volumes,
        aggregate_range_kw: RangeDoc {
            min_kw: range_min,
            max_kw: range_max,
        },
        fairness,
        stress,
        config: config.clone(),
    })
}

fn substream_seed(master: u64, domain: SeedDomain) -> u64 {
    // Volume/stress samplers take plain u64 seeds; mix the domain in.
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (domain as u64)
}

/// Write `report.json` and the flat tables for one solve.
pub fn write_solve_outputs(report: &SolveReport, out: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(out.join("report.json"), json)?;

    let mut w = csv_writer(out, "intervals.csv")?;
    writeln!(w, "node,p_minus_kw,p_plus_kw")?;
    for iv in &report.solution.noncoordinated {
        writeln!(w, "{},{},{}", iv.node, iv.p_minus_kw, iv.p_plus_kw)?;
    }

    let mut w = csv_writer(out, "voltages.csv")?;
    writeln!(w, "node,v_min_pu,v_max_pu")?;
    for n in &report.stress.nodes {
        writeln!(w, "{},{},{}", n.node, n.v_min, n.v_max)?;
    }

    let mut w = csv_writer(out, "loadings.csv")?;
    writeln!(w, "from,to,max_loading,rating_kva")?;
    for l in &report.stress.lines {
        writeln!(w, "{},{},{},{}", l.from, l.to, l.max_loading, l.rating_kva)?;
    }
    Ok(())
}

fn csv_writer(out: &Path, name: &str) -> std::io::Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(
        out.join(name),
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Coordination,
    Uncertainty,
    Fairness,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coordination" => Ok(SweepAxis::Coordination),
            "uncertainty" => Ok(SweepAxis::Uncertainty),
            "fairness" => Ok(SweepAxis::Fairness),
            other => Err(format!(
                "unknown sweep axis `{other}` (coordination|uncertainty|fairness)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinationRow {
    pub level: f64,
    pub trial: u32,
    pub n_coordinated: usize,
    pub range_min_kw: f64,
    pub range_max_kw: f64,
    pub range_kw: f64,
    pub pct_increase: f64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyRow {
    pub loading: f64,
    pub eta: f64,
    pub gamma: f64,
    pub range_min_kw: f64,
    pub range_max_kw: f64,
    pub range_kw: f64,
    pub objective: f64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FairnessRow {
    pub sigma: f64,
    pub gini: f64,
    pub geometric_mean_kw: f64,
    pub range_kw: f64,
    pub objective: f64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum SweepReport {
    Coordination {
        seed: u64,
        baseline_range_kw: f64,
        rows: Vec<CoordinationRow>,
        #[serde(skip)]
        timings_ms: Vec<(f64, u32, f64)>,
    },
    Uncertainty {
        seed: u64,
        rows: Vec<UncertaintyRow>,
    },
    Fairness {
        seed: u64,
        rows: Vec<FairnessRow>,
    },
}

/// Solve a partition against a fully materialized feeder and return the
/// aggregate range of the joint envelope.
fn solve_range(
    feeder: &Feeder,
    config: &ScenarioConfig,
    partition: Partition,
    um: crate::robust::UncertaintyModel,
    fairness: Option<crate::solver::FairnessInputs>,
) -> Result<(EnvelopeSolution, Polytope, f64, f64), ScenarioError> {
    let sens = build_sensitivities(feeder);
    let (v_min, v_max) = config.voltage.bounds();
    let cs = assemble_feeder_system(feeder, &sens, v_min, v_max, config.thermal.rho)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let dp = build_problem(
        &cs,
        feeder,
        partition,
        um,
        fairness,
        config.solver.options(),
    )?;
    let sol = solve(&dp)?;
    let poly = residual_polytope(&dp, &sol)
        .map_err(|e| ScenarioError::Invalid(format!("residual polytope: {e}")))?;
    let (lo, hi) = joint_range(&sol, &poly)?;
    Ok((sol, poly, lo, hi))
}

/// Run a sweep over the given axis. Cells execute in a work pool; failures
/// are recorded per cell without aborting the sweep.
pub fn run_sweep(
    config: &ScenarioConfig,
    base_dir: &Path,
    axis: SweepAxis,
    jobs: usize,
) -> Result<SweepReport, ScenarioError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ScenarioError::Invalid(format!("thread pool: {e}")))?;
    match axis {
        SweepAxis::Coordination => coordination_sweep(config, base_dir, &pool),
        SweepAxis::Uncertainty => uncertainty_sweep(config, base_dir, &pool),
        SweepAxis::Fairness => fairness_sweep(config, base_dir, &pool),
    }
}

fn coordination_sweep(
    config: &ScenarioConfig,
    base_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<SweepReport, ScenarioError> {
    let spec = config.sweep.coordination.clone().unwrap_or_default();
    let feeder = materialize_feeder(config, base_dir)?;
    let n_cust = feeder.customers().len();
    let um = uncertainty_model(
        &feeder,
        config.uncertainty.eta,
        config.uncertainty.gamma,
        config.uncertainty.include_q,
    )?;

    // The non-coordinated baseline is recomputed for every sweep run.
    let baseline_partition = Partition::new(&feeder, vec![])?;
    let (_, _, lo0, hi0) = solve_range(&feeder, config, baseline_partition, um.clone(), None)?;
    let baseline_range = hi0 - lo0;

    let mut cells = Vec::new();
    for (li, &level) in spec.levels.iter().enumerate() {
        for trial in 0..spec.trials {
            cells.push((li, level, trial));
        }
    }
    let results: Vec<(usize, CoordinationRow, f64)> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(idx, &(li, level, trial))| {
                let n_m = (level * n_cust as f64).round() as usize;
                let mut rng = cell_stream(
                    config.seed,
                    SeedDomain::Grouping,
                    (li as u64) * 10_000 + trial as u64,
                );
                let started = Instant::now();
                let row = match partition_at_size(&feeder, n_m, &mut rng)
                    .and_then(|p| solve_range(&feeder, config, p, um.clone(), None))
                {
                    Ok((_, _, lo, hi)) => {
                        let range = hi - lo;
                        CoordinationRow {
                            level,
                            trial,
                            n_coordinated: n_m,
                            range_min_kw: lo,
                            range_max_kw: hi,
                            range_kw: range,
                            pct_increase: (range - baseline_range) / baseline_range * 100.0,
                            status: "ok".into(),
                        }
                    }
                    Err(e) => CoordinationRow {
                        level,
                        trial,
                        n_coordinated: n_m,
                        range_min_kw: f64::NAN,
                        range_max_kw: f64::NAN,
                        range_kw: f64::NAN,
                        pct_increase: f64::NAN,
                        status: e.to_string(),
                    },
                };
                (idx, row, started.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    });
    let mut results = results;
    results.sort_by_key(|&(idx, _, _)| idx);
    let timings = results
        .iter()
        .map(|(_, row, ms)| (row.level, row.trial, *ms))
        .collect();
    let rows = results.into_iter().map(|(_, row, _)| row).collect();
    Ok(SweepReport::Coordination {
        seed: config.seed,
        baseline_range_kw: baseline_range,
        rows,
        timings_ms: timings,
    })
}

fn uncertainty_sweep(
    config: &ScenarioConfig,
    base_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<SweepReport, ScenarioError> {
    let spec = config.sweep.uncertainty.clone().unwrap_or_default();
    // One feeder per loading regime; the spatial profile is shared.
    let mut feeders = Vec::new();
    for &loading in &spec.loadings {
        feeders.push((
            loading,
            materialize_feeder_with(config, base_dir, Some(loading))?,
        ));
    }
    let mut cells = Vec::new();
    for (fi, (loading, _)) in feeders.iter().enumerate() {
        for &eta in &spec.etas {
            for &gamma in &spec.gammas {
                cells.push((fi, *loading, eta, gamma));
            }
        }
    }
    let results: Vec<(usize, UncertaintyRow)> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(idx, &(fi, loading, eta, gamma))| {
                let feeder = &feeders[fi].1;
                let row = (|| -> Result<UncertaintyRow, ScenarioError> {
                    let partition = partitions(config, feeder)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| ScenarioError::Invalid("no partition".into()))?;
                    let um = uncertainty_model(feeder, eta, gamma, config.uncertainty.include_q)?;
                    let (sol, _, lo, hi) = solve_range(feeder, config, partition, um, None)?;
                    Ok(UncertaintyRow {
                        loading,
                        eta,
                        gamma,
                        range_min_kw: lo,
                        range_max_kw: hi,
                        range_kw: hi - lo,
                        objective: sol.objective,
                        status: "ok".into(),
                    })
                })()
                .unwrap_or_else(|e| UncertaintyRow {
                    loading,
                    eta,
                    gamma,
                    range_min_kw: f64::NAN,
                    range_max_kw: f64::NAN,
                    range_kw: f64::NAN,
                    objective: f64::NAN,
                    status: e.to_string(),
                });
                (idx, row)
            })
            .collect()
    });
    let mut results = results;
    results.sort_by_key(|&(idx, _)| idx);
    Ok(SweepReport::Uncertainty {
        seed: config.seed,
        rows: results.into_iter().map(|(_, r)| r).collect(),
    })
}

fn fairness_sweep(
    config: &ScenarioConfig,
    base_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<SweepReport, ScenarioError> {
    let spec = config.sweep.fairness.clone().unwrap_or_default();
    if config.fairness.is_none() {
        return Err(ScenarioError::Invalid(
            "fairness sweep requires a [fairness] section".into(),
        ));
    }
    let feeder = materialize_feeder(config, base_dir)?;
    let um = uncertainty_model(
        &feeder,
        config.uncertainty.eta,
        config.uncertainty.gamma,
        config.uncertainty.include_q,
    )?;

    let results: Vec<(usize, FairnessRow)> = pool.install(|| {
        spec.sigmas
            .par_iter()
            .enumerate()
            .map(|(idx, &sigma)| {
                let row = (|| -> Result<FairnessRow, ScenarioError> {
                    let partition = partitions(config, &feeder)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| ScenarioError::Invalid("no partition".into()))?;
                    let fc = fairness_for_partition(config, &feeder, &partition, Some(sigma))?
                        .expect("fairness section present");
                    let inputs =
                        solver_inputs(&fc).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                    let (sol, poly, lo, hi) =
                        solve_range(&feeder, config, partition.clone(), um.clone(), Some(inputs))?;
                    let volumes = volumes_doc(
                        &sol,
                        &poly,
                        config.volume.budget,
                        substream_seed(config.seed, SeedDomain::Volume).wrapping_add(idx as u64),
                    )?;
                    let fd = fairness_doc(config, &feeder, &partition, &sol, Some(sigma))?
                        .expect("fairness doc");
                    Ok(FairnessRow {
                        sigma,
                        gini: fd.gini,
                        geometric_mean_kw: volumes.geometric_mean_kw,
                        range_kw: hi - lo,
                        objective: sol.objective,
                        status: "ok".into(),
                    })
                })()
                .unwrap_or_else(|e| FairnessRow {
                    sigma,
                    gini: f64::NAN,
                    geometric_mean_kw: f64::NAN,
                    range_kw: f64::NAN,
                    objective: f64::NAN,
                    status: e.to_string(),
                });
                (idx, row)
            })
            .collect()
    });
    let mut results = results;
    results.sort_by_key(|&(idx, _)| idx);
    Ok(SweepReport::Fairness {
        seed: config.seed,
        rows: results.into_iter().map(|(_, r)| r).collect(),
    })
}

/// Write the sweep JSON and CSV tables. Wall-clock timings, when present,
/// go to `times.csv` so the main documents stay reproducible.
pub fn write_sweep_outputs(report: &SweepReport, out: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(report).expect("sweep serializes");
    std::fs::write(out.join("sweep.json"), json)?;
    match report {
        SweepReport::Coordination {
            rows, timings_ms, ..
        } => {
            let mut w = csv_writer(out, "coordination.csv")?;
            writeln!(
                w,
                "level,trial,n_coordinated,range_min_kw,range_max_kw,range_kw,pct_increase,status"
            )?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.level,
                    r.trial,
                    r.n_coordinated,
                    r.range_min_kw,
                    r.range_max_kw,
                    r.range_kw,
                    r.pct_increase,
                    r.status
                )?;
            }
            let mut w = csv_writer(out, "times.csv")?;
            writeln!(w, "level,trial,wall_ms")?;
            for (level, trial, ms) in timings_ms {
                writeln!(w, "{level},{trial},{ms}")?;
            }
        }
        SweepReport::Uncertainty { rows, .. } => {
            let mut w = csv_writer(out, "uncertainty.csv")?;
            writeln!(
                w,
                "loading,eta,gamma,range_min_kw,range_max_kw,range_kw,objective,status"
            )?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.loading,
                    r.eta,
                    r.gamma,
                    r.range_min_kw,
                    r.range_max_kw,
                    r.range_kw,
                    r.objective,
                    r.status
                )?;
            }
        }
        SweepReport::Fairness { rows, .. } => {
            let mut w = csv_writer(out, "fairness.csv")?;
            writeln!(w, "sigma,gini,geometric_mean_kw,range_kw,objective,status")?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.sigma, r.gini, r.geometric_mean_kw, r.range_kw, r.objective, r.status
                )?;
            }
        }
    }
    Ok(())
}

/// Build a constraint-system dump for the `build` subcommand.
pub fn build_constraints_doc(
    config: &ScenarioConfig,
    base_dir: &Path,
) -> Result<(crate::constraints::ConstraintDoc, FeederSummary), ScenarioError> {
    let feeder = materialize_feeder(config, base_dir)?;
    let sens = build_sensitivities(&feeder);
    let (v_min, v_max) = config.voltage.bounds();
    let cs = assemble_feeder_system(&feeder, &sens, v_min, v_max, config.thermal.rho)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok((cs.to_doc(), feeder_summary(&feeder)))
}

/// Stress an already designed envelope with a fresh sample budget.
pub fn run_stress(
    config: &ScenarioConfig,
    base_dir: &Path,
    interior_override: Option<usize>,
) -> Result<StressReport, ScenarioError> {
    let feeder = materialize_feeder(config, base_dir)?;
    let sens = build_sensitivities(&feeder);
    let (v_min, v_max) = config.voltage.bounds();
    let cs = assemble_feeder_system(&feeder, &sens, v_min, v_max, config.thermal.rho)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let partition = partitions(config, &feeder)?
        .into_iter()
        .next()
        .ok_or_else(|| ScenarioError::Invalid("no partition".into()))?;
    let um = uncertainty_model(
        &feeder,
        config.uncertainty.eta,
        config.uncertainty.gamma,
        config.uncertainty.include_q,
    )?;
    let fairness = match fairness_for_partition(config, &feeder, &partition, None)? {
        Some(fc) => Some(solver_inputs(&fc).map_err(|e| ScenarioError::Invalid(e.to_string()))?),
        None => None,
    };
    let dp = build_problem(
        &cs,
        &feeder,
        partition,
        um,
        fairness,
        config.solver.options(),
    )?;
    let sol = solve(&dp)?;
    let poly = residual_polytope(&dp, &sol)
        .map_err(|e| ScenarioError::Invalid(format!("residual polytope: {e}")))?;
    let opts = StressOptions {
        interior: interior_override.unwrap_or(config.stress.interior),
        random_corners: config.stress.random_corners,
        q_adversarial: config.stress.q_adversarial,
    };
    let samples = stress_sample(
        &dp,
        &sens,
        &sol,
        &poly,
        &opts,
        substream_seed(config.seed, SeedDomain::Stress),
    );
    Ok(stress_report(&feeder, &sens, &samples))
}

/// Mean aggregate-range increase per coordination level, for quick
/// inspection and the sweep summary printed by the CLI.
pub fn coordination_level_means(rows: &[CoordinationRow]) -> Vec<(f64, f64)> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.level).collect();
    levels.dedup();
    levels
        .into_iter()
        .map(|level| {
            let gains: Vec<f64> = rows
                .iter()
                .filter(|r| r.level == level && r.status == "ok")
                .map(|r| r.pct_increase)
                .collect();
            let mean = if gains.is_empty() {
                f64::NAN
            } else {
                gains.iter().sum::<f64>() / gains.len() as f64
            };
            (level, mean)
        })
        .collect()
}
