//! Scenario configuration and materialization.
//!
//! A scenario document (TOML) names the feeder, the coordinated set, device
//! limit and fixed-load overrides, the uncertainty and fairness settings,
//! and the sweep grids. One master seed drives per-purpose substreams
//! (grouping, limits, fixed loads, volume sampling, stress sampling,
//! weights), so changing one axis never perturbs the draws of another.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairness::FairnessConfig;
use crate::feeder::{load_feeder, Feeder};
use crate::robust::UncertaintyModel;
use crate::solver::{Partition, SolveError, SolverOptions};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("feeder error: {0}")]
    Feeder(#[from] crate::feeder::FeederError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Deterministic substream purposes hanging off the master seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedDomain {
    Grouping = 1,
    Limits = 2,
    FixedLoads = 3,
    Volume = 4,
    Stress = 5,
    Weights = 6,
}

pub fn substream(master: u64, domain: SeedDomain) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(domain as u64);
    rng
}

/// Substream for one sweep cell, independent of execution order.
pub fn cell_stream(master: u64, domain: SeedDomain, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((domain as u64) << 32 | cell);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub feeder: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub voltage: VoltageSpec,
    #[serde(default)]
    pub thermal: ThermalSpec,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub limits: LimitSpec,
    #[serde(default)]
    pub fixed_loads: FixedLoadSpec,
    #[serde(default)]
    pub uncertainty: UncertaintySpec,
    #[serde(default)]
    pub fairness: Option<FairnessSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub stress: StressSpec,
    #[serde(default)]
    pub volume: VolumeSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<(ScenarioConfig, PathBuf), ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let config: ScenarioConfig = toml::from_str(&text)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((config, base_dir))
    }

    /// Feeder path resolved relative to the config file's directory.
    pub fn feeder_path(&self, base_dir: &Path) -> PathBuf {
        if self.feeder.is_absolute() {
            self.feeder.clone()
        } else {
            base_dir.join(&self.feeder)
        }
    }

    /// Nominal formulation: no tightening, no active fairness floor.
    pub fn is_nominal(&self) -> bool {
        let robust = self.uncertainty.eta > 0.0 && self.uncertainty.gamma > 0.0;
        let fair = self
            .fairness
            .as_ref()
            .map(|f| f.sigma_plus < 1.0 || f.sigma_minus < 1.0)
            .unwrap_or(false);
        !robust && !fair
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageSpec {
    /// Symmetric statutory band around 1 pu, percent.
    #[serde(default = "default_band_pct")]
    pub band_pct: f64,
    /// Explicit squared bounds override the band when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_min_pu2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max_pu2: Option<f64>,
}

fn default_band_pct() -> f64 {
    5.0
}

impl Default for VoltageSpec {
    fn default() -> Self {
        VoltageSpec {
            band_pct: default_band_pct(),
            v_min_pu2: None,
            v_max_pu2: None,
        }
    }
}

impl VoltageSpec {
    pub fn bounds(&self) -> (f64, f64) {
        let lo = 1.0 - self.band_pct / 100.0;
        let hi = 1.0 + self.band_pct / 100.0;
        (
            self.v_min_pu2.unwrap_or(lo * lo),
            self.v_max_pu2.unwrap_or(hi * hi),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSpec {
    #[serde(default = "default_rho")]
    pub rho: usize,
}

fn default_rho() -> usize {
    8
}

impl Default for ThermalSpec {
    fn default() -> Self {
        ThermalSpec { rho: default_rho() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionSpec {
    /// Explicit coordinated node ids.
    Nodes { nodes: Vec<String> },
    /// Coordination share with randomized grouping trials.
    Fraction {
        fraction: f64,
        #[serde(default = "default_trials")]
        trials: u32,
    },
}

fn default_trials() -> u32 {
    10
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LimitSpec {
    #[default]
    FromFeeder,
    Homogeneous {
        p_max_kw: f64,
        q_max_kvar: f64,
    },
    /// Per-customer draw from a fixed choice set (heterogeneous fleets).
    Sampled {
        choices: Vec<f64>,
        q_max_kvar: f64,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FixedLoadSpec {
    #[default]
    FromFeeder,
    /// Consumption drawn from [0, max_kw] at the given power factor.
    Consumption { max_kw: f64, power_factor: f64 },
    /// Net injections drawn uniformly, then scaled by the loading factor.
    Uniform {
        p_range_kw: (f64, f64),
        q_range_kvar: (f64, f64),
        #[serde(default = "default_loading")]
        loading_factor: f64,
    },
}

fn default_loading() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub include_q: bool,
}

fn default_true() -> bool {
    true
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        UncertaintySpec {
            eta: 0.0,
            gamma: 0.0,
            include_q: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSpec {
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default = "default_sigma")]
    pub sigma_plus: f64,
    #[serde(default = "default_sigma")]
    pub sigma_minus: f64,
    #[serde(default)]
    pub group_weight: GroupWeightSpec,
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    /// Named policy, currently `"limits"`: weights proportional to the
    /// active-power device limits.
    Name(WeightName),
    /// Per-customer weights in feeder order.
    Explicit { explicit: Vec<f64> },
    /// Per-customer draw from a choice set.
    Sampled { choices: Vec<f64> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Limits,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Name(WeightName::Limits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupWeightSpec {
    /// Named policy, currently `"sum"`: the coordinated members' total.
    Name(GroupWeightName),
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeightName {
    Sum,
}

impl Default for GroupWeightSpec {
    fn default() -> Self {
        GroupWeightSpec::Name(GroupWeightName::Sum)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub strict_origin: bool,
    #[serde(default)]
    pub force_directional: bool,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> u32 {
    200
}
fn default_epsilon() -> f64 {
    1e-7
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            tol: default_tol(),
            max_iter: default_max_iter(),
            epsilon: default_epsilon(),
            strict_origin: false,
            force_directional: false,
        }
    }
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            epsilon: self.epsilon,
            strict_origin: self.strict_origin,
            force_directional: self.force_directional,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressSpec {
    #[serde(default = "default_interior")]
    pub interior: usize,
    #[serde(default = "default_corners")]
    pub random_corners: usize,
    #[serde(default)]
    pub q_adversarial: bool,
}

fn default_interior() -> usize {
    200
}
fn default_corners() -> usize {
    256
}

impl Default for StressSpec {
    fn default() -> Self {
        StressSpec {
            interior: default_interior(),
            random_corners: default_corners(),
            q_adversarial: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    #[serde(default = "default_budget")]
    pub budget: usize,
}

fn default_budget() -> usize {
    20_000
}

impl Default for VolumeSpec {
    fn default() -> Self {
        VolumeSpec {
            budget: default_budget(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub coordination: Option<CoordinationSweep>,
    #[serde(default)]
    pub uncertainty: Option<UncertaintySweep>,
    #[serde(default)]
    pub fairness: Option<FairnessSweep>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinationSweep {
    pub levels: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u32,
}

impl Default for CoordinationSweep {
    fn default() -> Self {
        CoordinationSweep {
            levels: vec![0.1, 0.3, 0.6, 1.0],
            trials: default_trials(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySweep {
    pub etas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub loadings: Vec<f64>,
}

impl Default for UncertaintySweep {
    fn default() -> Self {
        UncertaintySweep {
            etas: vec![0.1, 0.2, 0.3],
            gammas: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            loadings: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSweep {
    pub sigmas: Vec<f64>,
}

impl Default for FairnessSweep {
    fn default() -> Self {
        FairnessSweep {
            sigmas: (0..=10).rev().map(|k| k as f64 / 10.0).collect(),
        }
    }
}

/// Feeder with scenario overrides applied, ready for constraint assembly.
pub fn materialize_feeder(
    config: &ScenarioConfig,
    base_dir: &Path,
) -> Result<Feeder, ScenarioError> {
    materialize_feeder_with(config, base_dir, None)
}

/// As [`materialize_feeder`], optionally scaling the fixed-load profile.
pub fn materialize_feeder_with(
    config: &ScenarioConfig,
    base_dir: &Path,
    loading_override: Option<f64>,
) -> Result<Feeder, ScenarioError> {
    let mut feeder = load_feeder(&config.feeder_path(base_dir))?;
    let n_cust = feeder.customers().len();

    match &config.limits {
        LimitSpec::FromFeeder => {}
        LimitSpec::Homogeneous {
            p_max_kw,
            q_max_kvar,
        } => {
            feeder.set_limits_kw(&vec![(*p_max_kw, *q_max_kvar); n_cust]);
        }
        LimitSpec::Sampled {
            choices,
            q_max_kvar,
        } => {
            if choices.is_empty() {
                return Err(ScenarioError::Invalid("empty limit choice set".into()));
            }
            let mut rng = substream(config.seed, SeedDomain::Limits);
            let limits: Vec<(f64, f64)> = (0..n_cust)
                .map(|_| (choices[rng.gen_range(0..choices.len())], *q_max_kvar))
                .collect();
            feeder.set_limits_kw(&limits);
        }
    }

    let loading_extra = loading_override.unwrap_or(1.0);
    match &config.fixed_loads {
        FixedLoadSpec::FromFeeder => {
            if loading_extra != 1.0 {
                let scaled: Vec<(f64, f64)> = feeder
                    .customers()
                    .iter()
                    .map(|c| {
                        (
                            c.p_fixed * feeder.base_kva() * loading_extra,
                            c.q_fixed * feeder.base_kva() * loading_extra,
                        )
                    })
                    .collect();
                feeder.set_fixed_loads_kw(&scaled);
            }
        }
        FixedLoadSpec::Consumption {
            max_kw,
            power_factor,
        } => {
            let mut rng = substream(config.seed, SeedDomain::FixedLoads);
            let tan_phi = power_factor.abs().min(1.0).acos().tan();
            let loads: Vec<(f64, f64)> = (0..n_cust)
                .map(|_| {
                    let p = -rng.gen_range(0.0..=*max_kw) * loading_extra;
                    (p, p * tan_phi)
                })
                .collect();
            feeder.set_fixed_loads_kw(&loads);
        }
        FixedLoadSpec::Uniform {
            p_range_kw,
            q_range_kvar,
            loading_factor,
        } => {
            let mut rng = substream(config.seed, SeedDomain::FixedLoads);
            let factor = loading_factor * loading_extra;
            let loads: Vec<(f64, f64)> = (0..n_cust)
                .map(|_| {
                    (
                        rng.gen_range(p_range_kw.0..=p_range_kw.1) * factor,
                        rng.gen_range(q_range_kvar.0..=q_range_kvar.1) * factor,
                    )
                })
                .collect();
            feeder.set_fixed_loads_kw(&loads);
        }
    }

    Ok(feeder)
}

/// The partitions this scenario evaluates: one explicit set, or `trials`
/// random groupings at the configured share.
pub fn partitions(
    config: &ScenarioConfig,
    feeder: &Feeder,
) -> Result<Vec<Partition>, ScenarioError> {
    match &config.partition {
        PartitionSpec::Nodes { nodes } => Ok(vec![Partition::from_node_ids(feeder, nodes)?]),
        PartitionSpec::Fraction { fraction, trials } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(ScenarioError::Invalid(format!(
                    "coordination fraction {fraction} outside [0,1]"
                )));
            }
            let n_cust = feeder.customers().len();
            let n_m = (fraction * n_cust as f64).round() as usize;
            (0..*trials)
                .map(|trial| {
                    let mut rng = cell_stream(config.seed, SeedDomain::Grouping, trial as u64);
                    Ok(Partition::new(
                        feeder,
                        sample_subset(&mut rng, n_cust, n_m),
                    )?)
                })
                .collect()
        }
    }
}

/// Random grouping at an explicit size (sweep cells pick their own stream).
pub fn partition_at_size(
    feeder: &Feeder,
    n_m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Partition, ScenarioError> {
    let n_cust = feeder.customers().len();
    Ok(Partition::new(feeder, sample_subset(rng, n_cust, n_m))?)
}

fn sample_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    // Partial Fisher-Yates over customer indices.
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Per-customer fairness weights in feeder order.
pub fn customer_weights(
    config: &ScenarioConfig,
    feeder: &Feeder,
) -> Result<Option<Vec<f64>>, ScenarioError> {
    let Some(spec) = &config.fairness else {
        return Ok(None);
    };
    let n_cust = feeder.customers().len();
    let weights = match &spec.weights {
        WeightSpec::Name(WeightName::Limits) => feeder
            .customers()
            .iter()
            .map(|c| c.p_max * feeder.base_kva())
            .collect(),
        WeightSpec::Explicit { explicit } => {
            if explicit.len() != n_cust {
                return Err(ScenarioError::Invalid(format!(
                    "{} explicit weights for {} customers",
                    explicit.len(),
                    n_cust
                )));
            }
            explicit.clone()
        }
        WeightSpec::Sampled { choices } => {
            if choices.is_empty() {
                return Err(ScenarioError::Invalid("empty weight choice set".into()));
            }
            let mut rng = substream(config.seed, SeedDomain::Weights);
            (0..n_cust)
                .map(|_| choices[rng.gen_range(0..choices.len())])
                .collect()
        }
    };
    Ok(Some(weights))
}

/// Assemble the fairness configuration for one partition, with an optional
/// sigma override (sweeps vary sigma over one weight draw).
pub fn fairness_for_partition(
    config: &ScenarioConfig,
    feeder: &Feeder,
    partition: &Partition,
    sigma_override: Option<f64>,
) -> Result<Option<FairnessConfig>, ScenarioError> {
    let Some(spec) = &config.fairness else {
        return Ok(None);
    };
    let weights = customer_weights(config, feeder)?.expect("fairness spec present");
    let group = match spec.group_weight {
        GroupWeightSpec::Name(GroupWeightName::Sum) => {
            partition.coordinated().iter().map(|&c| weights[c]).sum()
        }
        GroupWeightSpec::Explicit(w) => w,
    };
    let weights_n: Vec<f64> = partition
        .noncoordinated()
        .iter()
        .map(|&c| weights[c])
        .collect();
    let (sp, sm) = match sigma_override {
        Some(s) => (s, s),
        None => (spec.sigma_plus, spec.sigma_minus),
    };
    Ok(Some(FairnessConfig {
        weight_m_plus: group,
        weight_m_minus: group,
        weights_n_plus: weights_n.clone(),
        weights_n_minus: weights_n,
        sigma_plus: sp,
        sigma_minus: sm,
    }))
}

/// Budgeted uncertainty model for a feeder at the given settings.
pub fn uncertainty_model(
    feeder: &Feeder,
    eta: f64,
    gamma: f64,
    include_q: bool,
) -> Result<UncertaintyModel, ScenarioError> {
    UncertaintyModel::proportional(feeder.s_fixed(), eta, gamma, include_q)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))
}
