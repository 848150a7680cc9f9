//! Benchmark harness built around a synthetic distributed-training cost
//! model.
//!
//! The harness plays the role of an expensive training cluster at desk
//! scale: [`SyntheticClusterModel`] prices a parallelism configuration in
//! closed form, [`brute_force_optimum`] enumerates the exact optimum so
//! that search quality can be scored, and [`run_experiment`] runs the
//! optimizer and its baselines across seeds, writing one trace per run
//! plus a summary table. All of it is deterministic: the model is a pure
//! function of the configuration and the preset constants, and every
//! random choice flows from an explicit seed.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{
    fit_default_ensemble, training_samples, Clock, EnsembleOracle, Fidelity,
};
use crate::oracle::{CostOracle, CostOutcome, NoisyOracle, OracleError};
use crate::orchestrator::{run, IterationRecord, OrchestratorError, RunConfig, SearchVariant};
use crate::space::{ConfigSpace, Configuration, SpaceError, Value};
use crate::trace::{write_trace, TraceRow};

/// Upper bound on the number of configurations [`brute_force_optimum`]
/// will enumerate before giving up.
pub const ENUMERATION_GUARD: usize = 1_000_000;

/// Names accepted by [`ModelPreset::builtin`].
pub const BUILTIN_MODELS: [&str; 3] = ["dense-3b", "vl-8b", "moe-30b"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("model preset {name}: {problem}")]
    InvalidPreset { name: String, problem: String },
    #[error("unknown builtin model preset {0:?} (expected one of dense-3b, vl-8b, moe-30b)")]
    UnknownPreset(String),
    #[error("scenario {name}: {problem}")]
    InvalidScenario { name: String, problem: String },
    #[error("feasible set exceeds the enumeration guard of {guard} configurations")]
    SpaceTooLarge { guard: usize },
    #[error("no configuration in the space has finite cost under the model")]
    NoFeasibleOptimum,
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

/// Constants describing one workload on the synthetic cluster.
///
/// The fields mirror the preset JSON files under `presets/models/`:
/// total compute per step, parameter and activation memory, the global
/// batch size, communication weights for tensor and data parallelism,
/// the activation-recompute work multiplier, and the discount sequence
/// parallelism applies to tensor-parallel communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPreset {
    pub name: String,
    pub f_work: f64,
    pub p_mem_gb: f64,
    pub a_mem_gb: f64,
    pub global_batch: u64,
    pub alpha_tp: f64,
    pub alpha_dp: f64,
    pub recompute_factor: f64,
    pub sp_discount: f64,
}

impl ModelPreset {
    /// Load a preset from a JSON file.
    pub fn load_file(path: &Path) -> Result<ModelPreset, BenchError> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let preset: ModelPreset =
            serde_json::from_str(&text).map_err(|source| BenchError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        preset.validate()?;
        Ok(preset)
    }

    /// One of the presets bundled with the crate, by case-insensitive name.
    pub fn builtin(name: &str) -> Result<ModelPreset, BenchError> {
        let text = match name.to_ascii_lowercase().as_str() {
            "dense-3b" => include_str!("../presets/models/dense-3b.json"),
            "vl-8b" => include_str!("../presets/models/vl-8b.json"),
            "moe-30b" => include_str!("../presets/models/moe-30b.json"),
            other => return Err(BenchError::UnknownPreset(other.to_string())),
        };
        let preset: ModelPreset = serde_json::from_str(text).expect("bundled preset parses");
        preset.validate()?;
        Ok(preset)
    }

    fn validate(&self) -> Result<(), BenchError> {
        let problem = if self.name.is_empty() {
            Some("name must not be empty".to_string())
        } else if !(self.f_work > 0.0 && self.p_mem_gb > 0.0 && self.a_mem_gb > 0.0) {
            Some("work and memory constants must be positive".to_string())
        } else if self.global_batch == 0 {
            Some("global_batch must be at least 1".to_string())
        } else if !(self.alpha_tp > 0.0 && self.alpha_dp > 0.0) {
            Some("communication weights must be positive".to_string())
        } else if self.recompute_factor.is_nan() || self.recompute_factor < 1.0 {
            Some("recompute_factor must be at least 1".to_string())
        } else if !(self.sp_discount > 0.0 && self.sp_discount <= 1.0) {
            Some("sp_discount must lie in (0, 1]".to_string())
        } else {
            None
        };
        match problem {
            Some(problem) => Err(BenchError::InvalidPreset {
                name: self.name.clone(),
                problem,
            }),
            None => Ok(()),
        }
    }
}

/// Closed-form step-time model for a training job on the cluster
/// described by a [`ConfigSpace`]'s hardware block.
///
/// The cost of a configuration is the sum of five per-step terms:
/// compute (work divided by world size, device efficiency, and a
/// micro-batch efficiency factor), the pipeline bubble, tensor-parallel
/// communication (reduced by overlap headroom above the base bandwidth
/// and by sequence parallelism), data-parallel gradient exchange with a
/// bucket-size penalty, and expert routing. A configuration whose
/// per-device memory footprint exceeds the smallest assigned device is
/// infeasible. Features a space does not declare fall back to neutral
/// defaults, so the same model prices the reduced spaces and the full
/// one consistently.
#[derive(Debug, Clone)]
pub struct SyntheticClusterModel {
    preset: ModelPreset,
}

impl SyntheticClusterModel {
    pub fn new(preset: ModelPreset) -> SyntheticClusterModel {
        SyntheticClusterModel { preset }
    }

    pub fn preset(&self) -> &ModelPreset {
        &self.preset
    }

    /// Price one configuration. Pure: equal inputs give bit-identical
    /// outputs.
    pub fn cost(&self, space: &ConfigSpace, c: &Configuration) -> CostOutcome {
        let p = &self.preset;
        let num = |name: &str, default: f64| {
            space.value_of(c, name).map_or(default, Value::as_f64)
        };

        let pp = num("pp", 1.0);
        let tp = num("tp", 1.0);
        let dp = num("dp", 1.0);
        let ep = num("ep", 1.0);
        let cp = num("cp", 1.0);
        let mbs = num("mbs", 1.0);
        let sp = num("sp", 0.0) != 0.0;
        let ar = num("ar", 0.0) != 0.0;
        let tp_comm = num("tp_comm", 12.0);
        let ddp_bucket = num("ddp_bucket", 4.0);

        let world = pp * tp * dp * cp;
        let hardware = space.hardware();
        if world as u64 > hardware.total_devices() {
            return CostOutcome::Infeasible;
        }
        let efficiency = hardware.efficiency(world as u64);

        let activation_scale = if ar { 0.3 } else { 1.0 };
        let mem_gb = p.p_mem_gb / (pp * tp) + p.a_mem_gb * mbs * activation_scale / cp;
        if mem_gb > hardware.min_assigned_mem_gb(world as u64) {
            return CostOutcome::Infeasible;
        }

        let recompute = if ar { p.recompute_factor } else { 1.0 };
        let mbs_scale = 1.0 + 0.1 * mbs.log2();
        let t_compute = p.f_work * recompute / (world * efficiency * mbs_scale);

        let micro_steps = p.global_batch as f64 / (dp * mbs);
        let t_bubble = t_compute * (pp - 1.0) / micro_steps;

        let overlap = if tp > 1.0 {
            ((tp_comm - 12.0) / 16.0).clamp(0.0, 0.5)
        } else {
            0.0
        };
        let sp_factor = if sp { p.sp_discount } else { 1.0 };
        let t_tp = p.alpha_tp * (tp - 1.0) / tp * (1.0 - overlap) * sp_factor;

        let bucket_penalty = if dp > 1.0 {
            1.0 + 0.1 * (ddp_bucket.log2() - 2.0).powi(2)
        } else {
            1.0
        };
        let t_dp = p.alpha_dp * (dp - 1.0) / dp * bucket_penalty;

        let t_ep = p.alpha_tp * 0.5 * (ep - 1.0) / ep;

        CostOutcome::Cost(t_compute + t_bubble + t_tp + t_dp + t_ep)
    }
}

impl CostOracle for SyntheticClusterModel {
    fn evaluate(
        &self,
        space: &ConfigSpace,
        c: &Configuration,
    ) -> Result<CostOutcome, OracleError> {
        Ok(self.cost(space, c))
    }
}

/// Enumerate the whole feasible set and return the configuration with
/// the lowest finite cost, breaking ties in favour of the first one
/// enumerated. Fails if the space exceeds [`ENUMERATION_GUARD`] or no
/// configuration has finite cost.
pub fn brute_force_optimum(
    space: &ConfigSpace,
    oracle: &dyn CostOracle,
) -> Result<(Configuration, f64), BenchError> {
    let mut best: Option<(Configuration, f64)> = None;
    let mut seen = 0usize;
    for c in space.enumerate() {
        seen += 1;
        if seen > ENUMERATION_GUARD {
            return Err(BenchError::SpaceTooLarge {
                guard: ENUMERATION_GUARD,
            });
        }
        if let Ok(outcome) = oracle.evaluate(space, &c) {
            if let Some(cost) = outcome.finite() {
                if best.as_ref().is_none_or(|(_, b)| cost < *b) {
                    best = Some((c, cost));
                }
            }
        }
    }
    best.ok_or(BenchError::NoFeasibleOptimum)
}

/// What a baseline run produced: the best configuration seen, one
/// record per evaluation in the same shape the orchestrator emits, and
/// the totals needed for the summary table.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub best: Option<(f64, Configuration)>,
    pub iterations: Vec<IterationRecord>,
    pub real_evals: u64,
    pub elapsed_seconds: f64,
}

/// Uniform random search over the feasible set.
///
/// Draws are uniform over the enumerated feasible configurations; with
/// `without_replacement` the pool is shuffled once and consumed in
/// order, so a budget equal to the feasible count visits every
/// configuration exactly once. Every draw is charged as one real
/// evaluation and model time advances by the observed cost.
pub fn random_search(
    space: &ConfigSpace,
    oracle: &dyn CostOracle,
    budget_evals: u64,
    seed: u64,
    without_replacement: bool,
) -> Result<BaselineOutcome, BenchError> {
    let mut pool = Vec::new();
    for c in space.enumerate() {
        pool.push(c);
        if pool.len() > ENUMERATION_GUARD {
            return Err(BenchError::SpaceTooLarge {
                guard: ENUMERATION_GUARD,
            });
        }
    }
    if pool.is_empty() {
        return Err(BenchError::NoFeasibleOptimum);
    }
    let mut rng = StdRng::seed_from_u64(seed);
    if without_replacement {
        pool.shuffle(&mut rng);
    }

    let mut best: Option<(f64, Configuration)> = None;
    let mut iterations = Vec::new();
    let mut elapsed = 0.0;
    let mut draws = 0u64;
    while draws < budget_evals {
        let c = if without_replacement {
            if draws as usize >= pool.len() {
                break;
            }
            pool[draws as usize].clone()
        } else {
            pool[rng.gen_range(0..pool.len())].clone()
        };
        draws += 1;
        let outcome = oracle.evaluate(space, &c);
        if let Ok(o) = &outcome {
            if let Some(cost) = o.finite() {
                elapsed += cost;
                if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    best = Some((cost, c.clone()));
                }
            }
        }
        let row = TraceRow {
            iteration: draws,
            wall_seconds: elapsed,
            arm_selected: None,
            fidelity: Fidelity::Real,
            c_bb: outcome.ok(),
            c_bc: None,
            c_cb: None,
            c_cc: None,
            delta_sparse: None,
            delta_dense: None,
            best_cost: best.as_ref().map(|(b, _)| *b),
            real_evals: draws,
            sim_evals: 0,
        };
        iterations.push(IterationRecord {
            row,
            best_any: best.clone(),
            best_real: best.clone(),
        });
    }
    Ok(BaselineOutcome {
        best,
        iterations,
        real_evals: draws,
        elapsed_seconds: elapsed,
    })
}

/// One column of an experiment: the full optimizer, plain random
/// search, or one of the single-ingredient ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Autoscout,
    RandomSearch,
    SparseOnly,
    DenseOnly,
    NoOrchestrator,
    NoSimulators,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Autoscout,
        Method::RandomSearch,
        Method::SparseOnly,
        Method::DenseOnly,
        Method::NoOrchestrator,
        Method::NoSimulators,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Autoscout => "autoscout",
            Method::RandomSearch => "random_search",
            Method::SparseOnly => "sparse_only",
            Method::DenseOnly => "dense_only",
            Method::NoOrchestrator => "no_orchestrator",
            Method::NoSimulators => "no_simulators",
        }
    }

    /// Orchestrator variant behind this method, or `None` for random
    /// search which bypasses the orchestrator entirely.
    pub fn variant(self) -> Option<SearchVariant> {
        match self {
            Method::Autoscout => Some(SearchVariant::Full),
            Method::RandomSearch => None,
            Method::SparseOnly => Some(SearchVariant::SparseOnly),
            Method::DenseOnly => Some(SearchVariant::DenseOnly),
            Method::NoOrchestrator => Some(SearchVariant::NoOrchestrator),
            Method::NoSimulators => Some(SearchVariant::NoSimulators),
        }
    }

    /// Whether the tournament size changes anything for this method.
    fn uses_tournament(self) -> bool {
        !matches!(self, Method::RandomSearch | Method::DenseOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Tournament size field of a scenario: a single size or a sweep.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TournamentSize {
    Single(usize),
    Sweep(Vec<usize>),
}

impl TournamentSize {
    pub fn values(&self) -> Vec<usize> {
        match self {
            TournamentSize::Single(k) => vec![*k],
            TournamentSize::Sweep(ks) => ks.clone(),
        }
    }
}

impl Default for TournamentSize {
    fn default() -> TournamentSize {
        TournamentSize::Single(8)
    }
}

fn default_seed_count() -> u64 {
    20
}

/// A scripted experiment: which space and workload to search, how noisy
/// the simulators are, tournament size (or a sweep of sizes), and the
/// per-run budgets. `space` and `model_preset` are paths, resolved
/// relative to the scenario file when loaded from disk.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub space: PathBuf,
    pub model_preset: PathBuf,
    #[serde(default)]
    pub noise_pct: f64,
    #[serde(rename = "K", default)]
    pub k: TournamentSize,
    #[serde(default = "default_seed_count")]
    pub seeds: u64,
    pub budget_iters: u64,
    #[serde(default)]
    pub budget_seconds: Option<f64>,
    #[serde(default)]
    pub tau: Option<u64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
}

impl Scenario {
    /// Load a scenario file and resolve its relative paths against the
    /// file's directory.
    pub fn load_file(path: &Path) -> Result<Scenario, BenchError> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario: Scenario =
            serde_json::from_str(&text).map_err(|source| BenchError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        if scenario.space.is_relative() {
            scenario.space = dir.join(&scenario.space);
        }
        if scenario.model_preset.is_relative() {
            scenario.model_preset = dir.join(&scenario.model_preset);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let problem = if self.name.is_empty() {
            Some("name must not be empty".to_string())
        } else if !(0.0..1.0).contains(&self.noise_pct) {
            Some("noise_pct must lie in [0, 1)".to_string())
        } else if self.k.values().is_empty() || self.k.values().contains(&0) {
            Some("K must be a positive size or a non-empty list of them".to_string())
        } else if self.seeds == 0 {
            Some("seeds must be at least 1".to_string())
        } else if self.tau == Some(0) {
            Some("tau must be at least 1".to_string())
        } else if self.epsilon.is_some_and(|e| e.is_nan() || e <= 0.0) {
            Some("epsilon must be positive".to_string())
        } else if self.methods.as_ref().is_some_and(Vec::is_empty) {
            Some("methods must not be an empty list".to_string())
        } else {
            None
        };
        match problem {
            Some(problem) => Err(BenchError::InvalidScenario {
                name: self.name.clone(),
                problem,
            }),
            None => Ok(()),
        }
    }

    fn run_config(&self, method: Method, k: usize, seed: u64) -> RunConfig {
        let defaults = RunConfig::default();
        RunConfig {
            budget_iters: self.budget_iters,
            budget_seconds: self.budget_seconds,
            seed,
            k_tournament: k,
            tau: self.tau.unwrap_or(defaults.tau),
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
            variant: method.variant().unwrap_or(SearchVariant::Full),
            ..defaults
        }
    }
}

/// Per-run scorecard kept by [`run_experiment`].
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub completed: bool,
    /// Cost of the returned best configuration under the clean model.
    pub best_cost: Option<f64>,
    /// Real evaluations spent before the incumbent first came within
    /// the experiment's threshold of the true optimum.
    pub evals_to_threshold: Option<u64>,
    /// Iteration at which the run switched to real profiling, if it did.
    pub switched_at: Option<u64>,
    pub real_evals: u64,
    pub wall_seconds: f64,
}

/// Aggregates over the seeds of one `(method, k)` cell.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub k: usize,
    pub seeds: u64,
    pub completed: u64,
    pub median_best_cost: Option<f64>,
    pub mean_best_cost: Option<f64>,
    pub reached_threshold: u64,
    pub median_evals_to_threshold: Option<f64>,
    pub mean_wall_seconds: f64,
}

/// Everything [`run_experiment`] learned, also written to
/// `summary.csv` in the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub optimum_cost: f64,
    pub threshold: f64,
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
}

/// Median of a sample, averaging the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// First row at which the run's incumbent was genuinely within
/// `threshold` of the optimum, scored by re-pricing the incumbent on
/// the clean model; returns the real-evaluation count at that row.
pub fn evals_to_threshold(
    space: &ConfigSpace,
    model: &SyntheticClusterModel,
    iterations: &[IterationRecord],
    threshold: f64,
) -> Option<u64> {
    for rec in iterations {
        let reached = [rec.best_real.as_ref(), rec.best_any.as_ref()]
            .into_iter()
            .flatten()
            .filter_map(|(_, c)| model.cost(space, c).finite())
            .any(|true_cost| true_cost <= threshold);
        if reached {
            return Some(rec.row.real_evals);
        }
    }
    None
}

/// Number of training samples drawn on the clean model to fit the
/// simulator ensemble before each optimizer run.
pub const TRAINING_SAMPLES: usize = 200;

fn training_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x6a09_e667_f3bc_c909)
}

/// Fit the default simulator ensemble on [`TRAINING_SAMPLES`] clean-model
/// evaluations drawn from a seed-derived stream.
pub fn fit_clean_ensemble(
    space: &ConfigSpace,
    model: &SyntheticClusterModel,
    seed: u64,
) -> crate::evaluator::SimulatorEnsemble {
    let mut rng = StdRng::seed_from_u64(training_seed(seed));
    let samples = training_samples(space, model, TRAINING_SAMPLES, &mut rng);
    fit_default_ensemble(space, &samples, seed)
}

/// Run one method on one seed and score it against the known optimum.
///
/// The real oracle is always the clean model. Methods that use
/// simulators get a fresh ensemble fitted on [`TRAINING_SAMPLES`]
/// clean-model samples (drawn outside the run, so they appear in no
/// counter or cache), wrapped in multiplicative noise when the scenario
/// asks for it. Random search receives four evaluations per budgeted
/// iteration, matching the orchestrator's four-cell batches.
pub fn run_method(
    space: &ConfigSpace,
    model: &SyntheticClusterModel,
    scenario: &Scenario,
    method: Method,
    k: usize,
    seed: u64,
    optimum_cost: f64,
) -> Result<(RunRecord, Vec<TraceRow>), BenchError> {
    let threshold = optimum_cost * 1.05;
    let (best, iterations, switched_at, real_evals, elapsed) = match method.variant() {
        None => {
            let budget_evals = scenario.budget_iters.saturating_mul(4);
            let outcome = random_search(space, model, budget_evals, seed, false)?;
            (
                outcome.best,
                outcome.iterations,
                None,
                outcome.real_evals,
                outcome.elapsed_seconds,
            )
        }
        Some(variant) => {
            let sim: Option<Box<dyn CostOracle>> = if variant == SearchVariant::NoSimulators {
                None
            } else {
                let ensemble = fit_clean_ensemble(space, model, seed);
                let oracle = EnsembleOracle::new(ensemble);
                if scenario.noise_pct > 0.0 {
                    Some(Box::new(NoisyOracle::new(
                        oracle,
                        scenario.noise_pct,
                        noise_seed(seed),
                    )))
                } else {
                    Some(Box::new(oracle))
                }
            };
            let cfg = scenario.run_config(method, k, seed);
            let outcome = run(space, &cfg, model, sim, None, Clock::model())?;
            (
                outcome.best,
                outcome.iterations,
                outcome.switch.map(|s| s.t),
                outcome.real_evals,
                outcome.elapsed_seconds,
            )
        }
    };
    let best_cost = best
        .as_ref()
        .and_then(|(_, c)| model.cost(space, c).finite());
    let record = RunRecord {
        method,
        k,
        seed,
        completed: best.is_some(),
        best_cost,
        evals_to_threshold: evals_to_threshold(space, model, &iterations, threshold),
        switched_at,
        real_evals,
        wall_seconds: elapsed,
    };
    let rows = iterations.into_iter().map(|rec| rec.row).collect();
    Ok((record, rows))
}

fn summarize(records: &[RunRecord], method: Method, k: usize, seeds: u64) -> MethodSummary {
    let cell: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.method == method && r.k == k)
        .collect();
    let best: Vec<f64> = cell.iter().filter_map(|r| r.best_cost).collect();
    let reached: Vec<f64> = cell
        .iter()
        .filter_map(|r| r.evals_to_threshold.map(|e| e as f64))
        .collect();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    MethodSummary {
        method,
        k,
        seeds,
        completed: cell.iter().filter(|r| r.completed).count() as u64,
        median_best_cost: median(&best),
        mean_best_cost: mean(&best),
        reached_threshold: reached.len() as u64,
        median_evals_to_threshold: median(&reached),
        mean_wall_seconds: mean(&cell.iter().map(|r| r.wall_seconds).collect::<Vec<f64>>())
            .unwrap_or(0.0),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_runs_csv(path: &Path, runs: &[RunRecord]) -> io::Result<()> {
    let mut out = String::from(
        "method,k,seed,completed,best_cost,evals_to_threshold,switched_at,real_evals,wall_seconds\n",
    );
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.k,
            r.seed,
            r.completed,
            opt_cell(r.best_cost),
            r.evals_to_threshold
                .map(|e| e.to_string())
                .unwrap_or_default(),
            r.switched_at.map(|t| t.to_string()).unwrap_or_default(),
            r.real_evals,
            r.wall_seconds,
        ));
    }
    fs::write(path, out)
}

fn write_summary_csv(path: &Path, summary: &ExperimentSummary) -> io::Result<()> {
    let mut out = String::from(
        "method,k,seeds,completed,median_best_cost,mean_best_cost,\
         reached_threshold,median_evals_to_threshold,mean_wall_seconds\n",
    );
    for m in &summary.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.method,
            m.k,
            m.seeds,
            m.completed,
            opt_cell(m.median_best_cost),
            opt_cell(m.mean_best_cost),
            m.reached_threshold,
            opt_cell(m.median_evals_to_threshold),
            m.mean_wall_seconds,
        ));
    }
    fs::write(path, out)
}

/// Run a scenario end to end: compute the brute-force optimum, run
/// every method on every seed (and every tournament size, for methods
/// the tournament affects), write one trace CSV per run plus
/// `summary.csv`, and return the aggregates.
///
/// A run that fails is recorded as incomplete rather than aborting the
/// experiment.
pub fn run_experiment(scenario: &Scenario, out_dir: &Path) -> Result<ExperimentSummary, BenchError> {
    scenario.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| BenchError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let space = ConfigSpace::load_file(&scenario.space)?;
    let preset = ModelPreset::load_file(&scenario.model_preset)?;
    let model = SyntheticClusterModel::new(preset);
    let (_, optimum_cost) = brute_force_optimum(&space, &model)?;

    let methods = scenario
        .methods
        .clone()
        .unwrap_or_else(|| Method::ALL.to_vec());
    let ks = scenario.k.values();
    let mut runs = Vec::new();
    for &method in &methods {
        for &k in &ks {
            if !method.uses_tournament() && k != ks[0] {
                continue;
            }
            for seed in 0..scenario.seeds {
                match run_method(&space, &model, scenario, method, k, seed, optimum_cost) {
                    Ok((record, rows)) => {
                        let name = format!("{}_k{}_seed{}.csv", method.label(), k, seed);
                        let file =
                            File::create(out_dir.join(&name)).map_err(|source| BenchError::Io {
                                path: out_dir.join(&name),
                                source,
                            })?;
                        write_trace(BufWriter::new(file), &rows).map_err(|source| {
                            BenchError::Io {
                                path: out_dir.join(&name),
                                source,
                            }
                        })?;
                        runs.push(record);
                    }
                    Err(err) => {
                        log::warn!(
                            "{} k={k} seed={seed} failed: {err}",
                            method.label()
                        );
                        runs.push(RunRecord {
                            method,
                            k,
                            seed,
                            completed: false,
                            best_cost: None,
                            evals_to_threshold: None,
                            switched_at: None,
                            real_evals: 0,
                            wall_seconds: 0.0,
                        });
                    }
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for &method in &methods {
        for &k in &ks {
            if !method.uses_tournament() && k != ks[0] {
                continue;
            }
            summaries.push(summarize(&runs, method, k, scenario.seeds));
        }
    }
    let summary = ExperimentSummary {
        scenario: scenario.name.clone(),
        optimum_cost,
        threshold: optimum_cost * 1.05,
        methods: summaries,
        runs,
    };
    write_runs_csv(&out_dir.join("runs.csv"), &summary.runs).map_err(|source| BenchError::Io {
        path: out_dir.join("runs.csv"),
        source,
    })?;
    write_summary_csv(&out_dir.join("summary.csv"), &summary).map_err(|source| BenchError::Io {
        path: out_dir.join("summary.csv"),
        source,
    })?;
    Ok(summary)
}
