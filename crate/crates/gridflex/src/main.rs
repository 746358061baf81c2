//! Command-line front end: scenario solves, sweeps, stress runs, constraint
//! dumps, and report summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridflex::feeder::eulv::{convert, EulvOptions};
use gridflex::feeder::load_feeder;
use gridflex::report::{
    build_constraints_doc, coordination_level_means, run_solve, run_stress, run_sweep,
    write_solve_outputs, write_sweep_outputs, SweepAxis, SweepReport,
};
use gridflex::scenario::{ScenarioConfig, ScenarioError};
use gridflex::solver::SolveError;

#[derive(Parser)]
#[command(
    name = "gridflex",
    about = "Network-safe dynamic operating envelopes for radial feeders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a feeder and dump the stacked constraint system.
    Build {
        /// Scenario config (voltage band, facet count, overrides).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feeder document; overrides the config's feeder path.
        #[arg(long)]
        feeder: Option<PathBuf>,
        /// EU LV test feeder CSVs to convert first (with --eulv-loads).
        #[arg(long, requires = "eulv_loads")]
        eulv_lines: Option<PathBuf>,
        #[arg(long)]
        eulv_loads: Option<PathBuf>,
        #[arg(long)]
        eulv_codes: Option<PathBuf>,
        /// Slack bus id for the converted feeder.
        #[arg(long, default_value = "1")]
        eulv_slack: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one scenario and write the full report.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run the nonlinear stress analysis with a fresh sample budget.
    Stress {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Interior sample count override.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Sweep one axis of the scenario grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// coordination | uncertainty | fairness
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for sweep cells (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Summarize an existing report document.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if infeasible(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn infeasible(err: &ScenarioError) -> bool {
    matches!(err, ScenarioError::Solve(SolveError::Infeasible { .. }))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(ScenarioConfig, PathBuf), ScenarioError> {
    let (mut config, base_dir) = ScenarioConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok((config, base_dir))
}

fn dispatch(cli: Cli) -> Result<ExitCode, ScenarioError> {
    match cli.command {
        Command::Build {
            config,
            feeder,
            eulv_lines,
            eulv_loads,
            eulv_codes,
            eulv_slack,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            // Optional conversion step before validation.
            let feeder_path = if let (Some(lines), Some(loads)) = (&eulv_lines, &eulv_loads) {
                let opts = EulvOptions {
                    slack_bus: eulv_slack,
                    ..EulvOptions::default()
                };
                let doc = convert(lines, loads, eulv_codes.as_deref(), &opts)?;
                let path = out.join("feeder.json");
                std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())?;
                println!(
                    "converted EU LV CSVs: {} nodes, {} customers -> {}",
                    doc.nodes.len(),
                    doc.customers.len(),
                    path.display()
                );
                path
            } else if let Some(path) = feeder {
                path
            } else if let Some(cfg_path) = &config {
                let (cfg, base) = ScenarioConfig::load(cfg_path)?;
                cfg.feeder_path(&base)
            } else {
                return Err(ScenarioError::Invalid(
                    "build needs --feeder, --config, or --eulv-lines/--eulv-loads".into(),
                ));
            };

            let feeder = load_feeder(&feeder_path)?;
            println!(
                "feeder ok: {} nodes, {} lines, {} customers on {} kVA",
                feeder.n(),
                feeder.lines().len(),
                feeder.customers().len(),
                feeder.base_kva()
            );

            let cfg = match &config {
                Some(path) => {
                    let (mut cfg, base) = ScenarioConfig::load(path)?;
                    cfg.feeder = cfg.feeder_path(&base);
                    cfg
                }
                None => default_build_config(&feeder_path),
            };
            let (doc, summary) = build_constraints_doc(&cfg, Path::new(""))?;
            let path = out.join("constraints.json");
            std::fs::write(&path, serde_json::to_string(&doc).unwrap())?;
            println!(
                "constraint system: {} rows over {} nodes -> {}",
                doc.rows.len(),
                summary.nodes,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve { config, out, seed } => {
            let (config, base_dir) = load_config(&config, seed)?;
            let report = run_solve(&config, &base_dir)?;
            write_solve_outputs(&report, &out)?;
            println!(
                "solve {}: objective {:.6}, range [{:.3}, {:.3}] kW, rows {}/{} kept",
                report.solution.status,
                report.solution.objective,
                report.aggregate_range_kw.min_kw,
                report.aggregate_range_kw.max_kw,
                report.solution.rows_kept,
                report.solution.rows_kept + report.solution.rows_dropped,
            );
            if report.nominal_problem {
                println!("formulation: nominal problem (no tightening, fairness inactive)");
            }
            println!(
                "stress: v in [{:.4}, {:.4}] pu, max loading {:.3}, {} samples",
                report.stress.worst_undervoltage_pu,
                report.stress.worst_overvoltage_pu,
                report.stress.worst_loading,
                report.stress.samples
            );
            println!("report written to {}", out.join("report.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Stress {
            config,
            out,
            seed,
            samples,
        } => {
            let (config, base_dir) = load_config(&config, seed)?;
            let report = run_stress(&config, &base_dir, samples)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("stress.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
            println!(
                "stress: v in [{:.4}, {:.4}] pu, max loading {:.3}, {} samples ({} non-converged)",
                report.worst_undervoltage_pu,
                report.worst_overvoltage_pu,
                report.worst_loading,
                report.samples,
                report.non_converged
            );
            println!("written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            out,
            seed,
            jobs,
        } => {
            let (config, base_dir) = load_config(&config, seed)?;
            let report = run_sweep(&config, &base_dir, axis, jobs)?;
            write_sweep_outputs(&report, &out)?;
            match &report {
                SweepReport::Coordination {
                    baseline_range_kw,
                    rows,
                    ..
                } => {
                    println!("baseline aggregate range: {baseline_range_kw:.3} kW");
                    for (level, mean) in coordination_level_means(rows) {
                        println!("  level {level:.0$}: mean gain {mean:+.2}%", 2);
                    }
                }
                SweepReport::Uncertainty { rows, .. } => {
                    println!("{} uncertainty cells solved", rows.len());
                }
                SweepReport::Fairness { rows, .. } => {
                    for r in rows {
                        println!(
                            "  sigma {:.2}: gini {:.4}, size {:.3} kW",
                            r.sigma, r.gini, r.geometric_mean_kw
                        );
                    }
                }
            }
            println!("sweep written to {}", out.join("sweep.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(&input)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ScenarioError::Invalid(format!("not a report document: {e}")))?;
            summarize_report(&value);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn default_build_config(feeder_path: &Path) -> ScenarioConfig {
    let text = format!(
        "feeder = {:?}\n[partition]\nnodes = []\n",
        feeder_path.to_string_lossy()
    );
    toml::from_str(&text).expect("default build config")
}

fn summarize_report(value: &serde_json::Value) {
    let get = |path: &[&str]| -> Option<&serde_json::Value> {
        let mut cur = value;
        for key in path {
            cur = cur.get(key)?;
        }
        Some(cur)
    };
    if let Some(status) = get(&["solution", "status"]) {
        println!("status: {status}");
    }
    if let Some(obj) = get(&["solution", "objective"]).and_then(|v| v.as_f64()) {
        println!("objective (log kW-volume): {obj:.6}");
    }
    if let (Some(lo), Some(hi)) = (
        get(&["aggregate_range_kw", "min_kw"]).and_then(|v| v.as_f64()),
        get(&["aggregate_range_kw", "max_kw"]).and_then(|v| v.as_f64()),
    ) {
        println!("aggregate range: [{lo:.3}, {hi:.3}] kW");
    }
    if let Some(size) = get(&["volumes", "geometric_mean_kw"]).and_then(|v| v.as_f64()) {
        println!("geometric-mean envelope size: {size:.3} kW");
    }
    if let Some(gini) = get(&["fairness", "gini"]).and_then(|v| v.as_f64()) {
        println!("gini: {gini:.4}");
    }
    if let (Some(lo), Some(hi), Some(load)) = (
        get(&["stress", "worst_undervoltage_pu"]).and_then(|v| v.as_f64()),
        get(&["stress", "worst_overvoltage_pu"]).and_then(|v| v.as_f64()),
        get(&["stress", "worst_loading"]).and_then(|v| v.as_f64()),
    ) {
        println!("stress: v in [{lo:.4}, {hi:.4}] pu, max loading {load:.3}");
    }
    if let Some(rows) = get(&["rows"]).and_then(|v| v.as_array()) {
        println!("sweep rows: {}", rows.len());
    }
}
