//! Cost evaluation with two fidelities: a cheap learned simulator ensemble
//! and the expensive real oracle, plus the machinery that decides when the
//! simulators can no longer be trusted.
//!
//! Simulators are linear models over small, hand-picked input subsets, fit
//! by least squares on real training samples and scored by out-of-sample
//! R-squared on a held-out split. The ensemble blends simulators with
//! positive holdout scores, weighting each by its score. A run starts on the
//! ensemble when one is usable; every `tau` iterations the lowest simulated
//! cost seen so far and the current batch's best cell are re-evaluated on
//! the real oracle, and once the mean absolute percentage error of those
//! probes exceeds `epsilon`, the run switches to real evaluation for good.
//!
//! All outcomes flow through a per-configuration cache that never downgrades
//! knowledge: once a real cost is known it answers for both fidelities.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bandit::BanditState;
use crate::oracle::{CostOracle, CostOutcome, OracleError};
use crate::space::{ConfigSpace, Configuration};

/// Accounting charge for one simulated evaluation under the model clock.
pub const SIM_COST_SECONDS: f64 = 0.01;
/// Floor for ensemble predictions; linear extrapolation must not produce a
/// zero or negative cost.
pub const MIN_SIM_COST: f64 = 1e-9;
/// Ridge strength used when the normal equations are singular.
const RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("insufficient training data: need at least {need} samples, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("normal equations unsolvable even with ridge regularization")]
    SingularSystem,
}

/// One input column of a linear simulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "name", rename_all = "lowercase")]
pub enum SimInput {
    /// A declared feature; inactive features contribute their default.
    Feature(String),
    /// Number of devices of one hardware class the configuration occupies.
    Device(String),
}

impl SimInput {
    fn resolve(space: &ConfigSpace, name: &str) -> Option<SimInput> {
        if space.feature_index(name).is_some() {
            return Some(SimInput::Feature(name.to_string()));
        }
        if space.hardware().devices.iter().any(|d| d.class == name) {
            return Some(SimInput::Device(name.to_string()));
        }
        None
    }

    fn value(&self, space: &ConfigSpace, c: &Configuration) -> f64 {
        match self {
            SimInput::Feature(name) => {
                let i = space.feature_index(name).expect("resolved against this space");
                space
                    .value_of(c, name)
                    .unwrap_or(space.features()[i].default)
                    .as_f64()
            }
            SimInput::Device(class) => {
                let world = space.world_size(&c.sparse);
                let assigned = space.hardware().assign(world);
                space
                    .hardware()
                    .devices
                    .iter()
                    .zip(&assigned)
                    .find(|(d, _)| d.class == *class)
                    .map_or(0.0, |(_, &n)| n as f64)
            }
        }
    }
}

/// Named set of raw input names to fit one simulator over. Names that
/// resolve to neither a feature nor a device class are dropped at fit time,
/// so one spec list can serve spaces with different feature sets.
#[derive(Debug, Clone)]
pub struct SimulatorSpec {
    pub name: String,
    pub inputs: Vec<String>,
}

impl SimulatorSpec {
    pub fn new(name: &str, inputs: &[&str]) -> SimulatorSpec {
        SimulatorSpec {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The standard four-simulator family: compute throughput, communication,
/// memory pressure, and the data-parallel path.
pub fn default_simulator_specs() -> Vec<SimulatorSpec> {
    vec![
        SimulatorSpec::new("throughput", &["pp", "tp", "dp", "cp", "mbs", "a100", "a40"]),
        SimulatorSpec::new("communication", &["tp", "sp", "ar", "tp_comm"]),
        SimulatorSpec::new("memory", &["pp", "tp", "cp", "mbs", "ar"]),
        SimulatorSpec::new("data_parallel", &["dp", "ep", "ddp", "ddp_bucket", "mbs"]),
    ]
}

/// A least-squares cost model over a handful of scalar inputs.
#[derive(Debug, Clone, Serialize)]
pub struct LinearSimulator {
    pub name: String,
    pub inputs: Vec<SimInput>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Out-of-sample score on the holdout split; can be negative when the
    /// model predicts worse than the holdout mean.
    pub r_squared: f64,
    /// True when the plain normal equations were singular and a small ridge
    /// term was needed.
    pub regularized: bool,
}

impl LinearSimulator {
    pub fn predict(&self, space: &ConfigSpace, c: &Configuration) -> f64 {
        self.inputs
            .iter()
            .zip(&self.coefficients)
            .map(|(input, coef)| coef * input.value(space, c))
            .sum::<f64>()
            + self.intercept
    }
}

/// Rows held out for scoring: one fifth of the data, at least one sample.
fn holdout_size(n: usize) -> usize {
    (n / 5).max(1)
}

/// Fit one simulator on `(configuration, real cost)` pairs. A seeded shuffle
/// decides the holdout split, so identical inputs give identical models.
pub fn fit_simulator(
    space: &ConfigSpace,
    spec: &SimulatorSpec,
    samples: &[(Configuration, f64)],
    seed: u64,
) -> Result<LinearSimulator, EvaluatorError> {
    let inputs: Vec<SimInput> = spec
        .inputs
        .iter()
        .filter_map(|name| SimInput::resolve(space, name))
        .collect();
    let k = inputs.len();
    let n = samples.len();
    let h = holdout_size(n.max(1));
    if n < 2 || n - h < k + 1 {
        return Err(EvaluatorError::InsufficientData {
            need: k + 1 + holdout_size(k + 2),
            have: n,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let (holdout_idx, train_idx) = order.split_at(h);

    let rows = train_idx.len();
    let mut x = DMatrix::zeros(rows, k + 1);
    let mut y = DVector::zeros(rows);
    for (r, &i) in train_idx.iter().enumerate() {
        let (c, cost) = &samples[i];
        x[(r, 0)] = 1.0;
        for (j, input) in inputs.iter().enumerate() {
            x[(r, j + 1)] = input.value(space, c);
        }
        y[r] = *cost;
    }

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let (beta, regularized) = match xtx.clone().cholesky() {
        Some(ch) => (ch.solve(&xty), false),
        None => {
            let ridged = xtx + DMatrix::identity(k + 1, k + 1) * RIDGE;
            let ch = ridged.cholesky().ok_or(EvaluatorError::SingularSystem)?;
            (ch.solve(&xty), true)
        }
    };

    let sim = LinearSimulator {
        name: spec.name.clone(),
        inputs,
        coefficients: beta.as_slice()[1..].to_vec(),
        intercept: beta[0],
        r_squared: 0.0,
        regularized,
    };

    let held: Vec<(f64, f64)> = holdout_idx
        .iter()
        .map(|&i| {
            let (c, cost) = &samples[i];
            (sim.predict(space, c), *cost)
        })
        .collect();
    let mean = held.iter().map(|(_, y)| y).sum::<f64>() / held.len() as f64;
    let ss_tot: f64 = held.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    let ss_res: f64 = held.iter().map(|(p, y)| (y - p).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };

    Ok(LinearSimulator { r_squared, ..sim })
}

/// Simulators blended by non-negative holdout score. Weights are
/// `max(0, r2_i) / sum_j max(0, r2_j)`; when every score is non-positive the
/// ensemble is unusable and callers must evaluate on the real oracle.
#[derive(Debug, Clone, Serialize)]
pub struct SimulatorEnsemble {
    pub simulators: Vec<LinearSimulator>,
    pub weights: Vec<f64>,
}

impl SimulatorEnsemble {
    pub fn new(simulators: Vec<LinearSimulator>) -> SimulatorEnsemble {
        let raw: Vec<f64> = simulators.iter().map(|s| s.r_squared.max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = if total > 0.0 {
            raw.iter().map(|r| r / total).collect()
        } else {
            vec![0.0; simulators.len()]
        };
        SimulatorEnsemble {
            simulators,
            weights,
        }
    }

    pub fn is_usable(&self) -> bool {
        self.weights.iter().any(|&w| w > 0.0)
    }

    pub fn predict(&self, space: &ConfigSpace, c: &Configuration) -> Option<f64> {
        if !self.is_usable() {
            return None;
        }
        Some(
            self.simulators
                .iter()
                .zip(&self.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(s, &w)| w * s.predict(space, c))
                .sum(),
        )
    }
}

/// Fit the standard simulator family and blend whatever fits succeed.
pub fn fit_default_ensemble(
    space: &ConfigSpace,
    samples: &[(Configuration, f64)],
    seed: u64,
) -> SimulatorEnsemble {
    let sims = default_simulator_specs()
        .iter()
        .enumerate()
        .filter_map(|(i, spec)| fit_simulator(space, spec, samples, seed.wrapping_add(i as u64)).ok())
        .collect();
    SimulatorEnsemble::new(sims)
}

/// Draw up to `n` feasible configurations, evaluate them on `oracle`, and
/// keep the ones with finite cost. Used to build simulator training sets;
/// these calls go straight to the oracle and are not recorded anywhere.
pub fn training_samples<R: Rng>(
    space: &ConfigSpace,
    oracle: &dyn CostOracle,
    n: usize,
    rng: &mut R,
) -> Vec<(Configuration, f64)> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < n.saturating_mul(20).max(64) {
        attempts += 1;
        let Some(sparse) = space.sample_sparse(rng) else { break };
        let mask = space.mask(&sparse);
        let dense = space.project(&space.sample_dense_raw(rng), &mask);
        let c = Configuration { sparse, dense };
        if let Ok(CostOutcome::Cost(cost)) = oracle.evaluate(space, &c) {
            out.push((c, cost));
        }
    }
    out
}

/// Adapter exposing an ensemble through the oracle interface.
pub struct EnsembleOracle {
    ensemble: SimulatorEnsemble,
}

impl EnsembleOracle {
    pub fn new(ensemble: SimulatorEnsemble) -> EnsembleOracle {
        EnsembleOracle { ensemble }
    }

    pub fn ensemble(&self) -> &SimulatorEnsemble {
        &self.ensemble
    }
}

impl CostOracle for EnsembleOracle {
    fn evaluate(&self, space: &ConfigSpace, c: &Configuration) -> Result<CostOutcome, OracleError> {
        self.ensemble
            .predict(space, c)
            .map(|p| CostOutcome::Cost(p.max(MIN_SIM_COST)))
            .ok_or(OracleError::Unavailable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Simulated,
    Real,
}

impl Fidelity {
    pub fn label(self) -> &'static str {
        match self {
            Fidelity::Simulated => "simulated",
            Fidelity::Real => "real",
        }
    }
}

/// Elapsed-time source for budget accounting. The model clock charges each
/// evaluation its own cost (simulated ones a flat small fee, infeasible ones
/// nothing), which makes budget comparisons between methods independent of
/// host speed. The wall clock is for external command oracles whose cost is
/// genuinely paid in wall time.
#[derive(Debug, Clone)]
pub enum Clock {
    Model { elapsed: f64 },
    Wall { start: Instant },
}

impl Clock {
    pub fn model() -> Clock {
        Clock::Model { elapsed: 0.0 }
    }

    pub fn wall() -> Clock {
        Clock::Wall {
            start: Instant::now(),
        }
    }

    fn charge(&mut self, seconds: f64) {
        if let Clock::Model { elapsed } = self {
            *elapsed += seconds;
        }
    }

    pub fn elapsed_seconds(&self) -> f64 {
        match self {
            Clock::Model { elapsed } => *elapsed,
            Clock::Wall { start } => start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CacheEntry {
    sim: Option<f64>,
    real: Option<CostOutcome>,
}

/// Per-configuration memo of everything either fidelity has answered.
/// A real outcome, once stored, answers lookups at both fidelities; a
/// simulated cost only ever answers simulated lookups.
#[derive(Debug, Default)]
pub struct EvaluationCache {
    entries: HashMap<String, CacheEntry>,
}

impl EvaluationCache {
    pub fn lookup(&self, key: &str, mode: Fidelity) -> Option<CostOutcome> {
        let e = self.entries.get(key)?;
        match mode {
            Fidelity::Real => e.real,
            Fidelity::Simulated => e.real.or(e.sim.map(CostOutcome::Cost)),
        }
    }

    pub fn real(&self, key: &str) -> Option<CostOutcome> {
        self.entries.get(key).and_then(|e| e.real)
    }

    pub fn sim(&self, key: &str) -> Option<f64> {
        self.entries.get(key).and_then(|e| e.sim)
    }

    pub fn store_sim(&mut self, key: &str, cost: f64) {
        self.entries.entry(key.to_string()).or_default().sim = Some(cost);
    }

    pub fn store_real(&mut self, key: &str, outcome: CostOutcome) {
        self.entries.entry(key.to_string()).or_default().real = Some(outcome);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One fidelity checkpoint: simulated bests re-measured on the real oracle.
/// `mape` is absent when every probe failed and the decision was deferred.
#[derive(Debug, Clone, Serialize)]
pub struct MapeCheckpoint {
    pub t: u64,
    pub mape: Option<f64>,
    pub pairs: usize,
}

/// The moment the run abandoned the simulators.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SwitchRecord {
    pub t: u64,
    pub mape: f64,
}

pub struct BatchEvaluation {
    pub outcomes: Vec<Result<CostOutcome, OracleError>>,
    /// True when this batch's fidelity checkpoint found the simulators out
    /// of tolerance; the caller decides when to actually switch.
    pub switch_signal: bool,
}

/// Evaluation front-end that routes to the current fidelity, maintains the
/// cache and counters, charges the clock, and runs the periodic simulator
/// validation.
pub struct AdaptiveEvaluator<'a> {
    space: &'a ConfigSpace,
    real: &'a dyn CostOracle,
    sim: Option<Box<dyn CostOracle>>,
    mode: Fidelity,
    tau: u64,
    epsilon: f64,
    cache: EvaluationCache,
    clock: Clock,
    real_evals: u64,
    sim_evals: u64,
    sim_history: HashMap<String, (Configuration, f64)>,
    best_simulated: Option<(String, f64)>,
    first_cost: Option<f64>,
    best_any: Option<(f64, Configuration)>,
    best_real: Option<(f64, Configuration)>,
    mape_log: Vec<MapeCheckpoint>,
    switch: Option<SwitchRecord>,
}

impl<'a> AdaptiveEvaluator<'a> {
    /// Starts in simulated mode when a simulator source is supplied, real
    /// mode otherwise.
    pub fn new(
        space: &'a ConfigSpace,
        real: &'a dyn CostOracle,
        sim: Option<Box<dyn CostOracle>>,
        tau: u64,
        epsilon: f64,
        clock: Clock,
    ) -> AdaptiveEvaluator<'a> {
        assert!(tau >= 1, "validation period must be at least one iteration");
        assert!(epsilon > 0.0, "error tolerance must be positive");
        let mode = if sim.is_some() {
            Fidelity::Simulated
        } else {
            Fidelity::Real
        };
        AdaptiveEvaluator {
            space,
            real,
            sim,
            mode,
            tau,
            epsilon,
            cache: EvaluationCache::default(),
            clock,
            real_evals: 0,
            sim_evals: 0,
            sim_history: HashMap::new(),
            best_simulated: None,
            first_cost: None,
            best_any: None,
            best_real: None,
            mape_log: Vec::new(),
            switch: None,
        }
    }

    pub fn mode(&self) -> Fidelity {
        self.mode
    }

    pub fn real_evals(&self) -> u64 {
        self.real_evals
    }

    pub fn sim_evals(&self) -> u64 {
        self.sim_evals
    }

    pub fn elapsed_seconds(&self) -> f64 {
        self.clock.elapsed_seconds()
    }

    pub fn cache(&self) -> &EvaluationCache {
        &self.cache
    }

    pub fn mape_log(&self) -> &[MapeCheckpoint] {
        &self.mape_log
    }

    pub fn switch_record(&self) -> Option<SwitchRecord> {
        self.switch
    }

    /// First finite cost observed this run, at either fidelity. Rewards are
    /// normalized against it.
    pub fn first_cost(&self) -> Option<f64> {
        self.first_cost
    }

    /// Cheapest finite outcome seen so far at any fidelity.
    pub fn best_any(&self) -> Option<&(f64, Configuration)> {
        self.best_any.as_ref()
    }

    /// Cheapest finite real-oracle outcome seen so far.
    pub fn best_real(&self) -> Option<&(f64, Configuration)> {
        self.best_real.as_ref()
    }

    fn note_cost(&mut self, cost: f64, c: &Configuration, fidelity: Fidelity) {
        if self.first_cost.is_none() {
            self.first_cost = Some(cost);
        }
        if self.best_any.as_ref().is_none_or(|(b, _)| cost < *b) {
            self.best_any = Some((cost, c.clone()));
        }
        if fidelity == Fidelity::Real
            && self.best_real.as_ref().is_none_or(|(b, _)| cost < *b)
        {
            self.best_real = Some((cost, c.clone()));
        }
    }

    /// Evaluate one configuration at the current fidelity, serving cache
    /// hits for free. A failing simulator source falls back to the real
    /// oracle rather than losing the evaluation.
    pub fn evaluate_one(&mut self, c: &Configuration) -> Result<CostOutcome, OracleError> {
        let key = self.space.canonical_key(c);
        if let Some(hit) = self.cache.lookup(&key, self.mode) {
            return Ok(hit);
        }
        match self.mode {
            Fidelity::Simulated => {
                let sim = self.sim.as_ref().expect("simulated mode implies a source");
                match sim.evaluate(self.space, c) {
                    Ok(CostOutcome::Cost(cost)) => {
                        self.sim_evals += 1;
                        self.clock.charge(SIM_COST_SECONDS);
                        self.cache.store_sim(&key, cost);
                        self.sim_history.insert(key.clone(), (c.clone(), cost));
                        let better = self
                            .best_simulated
                            .as_ref()
                            .is_none_or(|(_, b)| cost < *b);
                        if better {
                            self.best_simulated = Some((key, cost));
                        }
                        self.note_cost(cost, c, Fidelity::Simulated);
                        Ok(CostOutcome::Cost(cost))
                    }
                    Ok(CostOutcome::Infeasible) => {
                        self.sim_evals += 1;
                        self.clock.charge(SIM_COST_SECONDS);
                        Ok(CostOutcome::Infeasible)
                    }
                    Err(_) => self.evaluate_real(c),
                }
            }
            Fidelity::Real => self.real_uncached(&key, c),
        }
    }

    /// Real-oracle evaluation regardless of mode, serving a cached real
    /// outcome when one exists. Used for final re-validation.
    pub fn evaluate_real(&mut self, c: &Configuration) -> Result<CostOutcome, OracleError> {
        let key = self.space.canonical_key(c);
        self.real_uncached(&key, c)
    }

    fn real_uncached(&mut self, key: &str, c: &Configuration) -> Result<CostOutcome, OracleError> {
        if let Some(hit) = self.cache.real(key) {
            return Ok(hit);
        }
        let outcome = self.real.evaluate(self.space, c)?;
        self.real_evals += 1;
        if let CostOutcome::Cost(cost) = outcome {
            self.clock.charge(cost);
            self.note_cost(cost, c, Fidelity::Real);
        }
        self.cache.store_real(key, outcome);
        Ok(outcome)
    }

    /// Evaluate a batch of cells at the current fidelity. In simulated mode,
    /// iterations `t` that are positive multiples of `tau` additionally
    /// validate the best simulated configuration and this batch's best cell
    /// against the real oracle.
    pub fn evaluate_batch(&mut self, t: u64, configs: &[Configuration]) -> BatchEvaluation {
        let outcomes = if self.mode == Fidelity::Real && self.real.max_parallel() > 1 {
            self.real_batch_parallel(configs)
        } else {
            configs.iter().map(|c| self.evaluate_one(c)).collect()
        };
        let mut switch_signal = false;
        if self.mode == Fidelity::Simulated && t >= 1 && t.is_multiple_of(self.tau) {
            switch_signal = self.validate_checkpoint(t, configs, &outcomes);
        }
        BatchEvaluation {
            outcomes,
            switch_signal,
        }
    }

    fn real_batch_parallel(
        &mut self,
        configs: &[Configuration],
    ) -> Vec<Result<CostOutcome, OracleError>> {
        let keys: Vec<String> = configs.iter().map(|c| self.space.canonical_key(c)).collect();
        let mut seen = HashSet::new();
        let pending: Vec<(String, &Configuration)> = keys
            .iter()
            .zip(configs)
            .filter(|(k, _)| self.cache.real(k).is_none() && seen.insert((*k).clone()))
            .map(|(k, c)| (k.clone(), c))
            .collect();

        let mut errors: HashMap<String, OracleError> = HashMap::new();
        let space = self.space;
        let real = self.real;
        for chunk in pending.chunks(self.real.max_parallel().max(1)) {
            let results: Vec<(String, Result<CostOutcome, OracleError>)> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|(k, c)| {
                            let key = k.clone();
                            scope.spawn(move || (key, real.evaluate(space, c)))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("oracle worker panicked"))
                        .collect()
                });
            for ((_, config), (key, result)) in chunk.iter().zip(results) {
                match result {
                    Ok(outcome) => {
                        self.real_evals += 1;
                        if let CostOutcome::Cost(cost) = outcome {
                            self.clock.charge(cost);
                            self.note_cost(cost, config, Fidelity::Real);
                        }
                        self.cache.store_real(&key, outcome);
                    }
                    Err(e) => {
                        errors.insert(key, e);
                    }
                }
            }
        }

        keys.iter()
            .map(|k| match self.cache.real(k) {
                Some(outcome) => Ok(outcome),
                None => Err(errors
                    .get(k)
                    .cloned()
                    .unwrap_or(OracleError::Failed("missing batch result".into()))),
            })
            .collect()
    }

    fn validate_checkpoint(
        &mut self,
        t: u64,
        configs: &[Configuration],
        outcomes: &[Result<CostOutcome, OracleError>],
    ) -> bool {
        let mut keys: Vec<String> = Vec::with_capacity(2);
        if let Some((k, _)) = &self.best_simulated {
            keys.push(k.clone());
        }
        let mut argmin: Option<(usize, f64)> = None;
        for (i, o) in outcomes.iter().enumerate() {
            if let Ok(CostOutcome::Cost(c)) = o {
                if argmin.is_none_or(|(_, b)| *c < b) {
                    argmin = Some((i, *c));
                }
            }
        }
        if let Some((i, _)) = argmin {
            let k = self.space.canonical_key(&configs[i]);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }

        let mut errors = Vec::with_capacity(keys.len());
        for key in keys {
            let Some((config, sim_cost)) = self.sim_history.get(&key).cloned() else {
                continue;
            };
            match self.real_uncached(&key, &config) {
                Ok(CostOutcome::Cost(real)) if real > 0.0 => {
                    errors.push((sim_cost - real).abs() / real);
                }
                Ok(CostOutcome::Cost(_)) | Ok(CostOutcome::Infeasible) => {
                    // A structure the simulators priced but the real system
                    // rejects is a full-scale miss.
                    errors.push(1.0);
                }
                Err(_) => {}
            }
        }

        if errors.is_empty() {
            self.mape_log.push(MapeCheckpoint {
                t,
                mape: None,
                pairs: 0,
            });
            return false;
        }
        let mape = errors.iter().sum::<f64>() / errors.len() as f64;
        self.mape_log.push(MapeCheckpoint {
            t,
            mape: Some(mape),
            pairs: errors.len(),
        });
        mape > self.epsilon
    }

    /// Abandon the simulators for good: flip to real mode, discount the
    /// bandit's accumulated statistics by `lambda` (means preserved), and
    /// return the `k_reval` distinct configurations with the lowest
    /// simulated costs, ordered by (cost, key), for real re-evaluation.
    pub fn switch_fidelity(
        &mut self,
        bandit: &mut BanditState,
        lambda: f64,
        k_reval: usize,
        t: u64,
    ) -> Vec<Configuration> {
        assert_eq!(
            self.mode,
            Fidelity::Simulated,
            "the fidelity switch is one-way"
        );
        self.mode = Fidelity::Real;
        let mape = self
            .mape_log
            .last()
            .and_then(|c| c.mape)
            .unwrap_or(f64::INFINITY);
        self.switch = Some(SwitchRecord { t, mape });
        bandit.scale(lambda);

        let mut ranked: Vec<(&String, &(Configuration, f64))> = self.sim_history.iter().collect();
        ranked.sort_by(|(ka, (_, ca)), (kb, (_, cb))| {
            ca.partial_cmp(cb)
                .expect("simulated costs are finite")
                .then_with(|| ka.cmp(kb))
        });
        ranked
            .into_iter()
            .take(k_reval)
            .map(|(_, (c, _))| c.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FnOracle;
    use crate::space::Value;
    use std::path::Path;

    fn full_space() -> ConfigSpace {
        ConfigSpace::load_file(Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/presets/spaces/cluster_full.json"
        )))
        .expect("bundled space loads")
    }

    fn linear_cost(space: &ConfigSpace, c: &Configuration) -> f64 {
        let v = |name: &str, default: f64| {
            space.value_of(c, name).map_or(default, |v| v.as_f64())
        };
        5.0 + 2.0 * v("pp", 1.0) + 0.5 * v("tp_comm", 12.0)
    }

    fn sampled(space: &ConfigSpace, n: usize, seed: u64) -> Vec<(Configuration, f64)> {
        let mut rng = StdRng::seed_from_u64(seed);
        let oracle = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(linear_cost(s, c)))
        });
        training_samples(space, &oracle, n, &mut rng)
    }

    #[test]
    fn fit_recovers_an_exactly_linear_cost() {
        let space = full_space();
        let samples = sampled(&space, 80, 41);
        assert_eq!(samples.len(), 80);
        let spec = SimulatorSpec::new("exact", &["pp", "tp_comm"]);
        let sim = fit_simulator(&space, &spec, &samples, 7).expect("fit succeeds");

        assert!(!sim.regularized, "well-conditioned system needs no ridge");
        assert!((sim.intercept - 5.0).abs() < 1e-6, "intercept {}", sim.intercept);
        assert!((sim.coefficients[0] - 2.0).abs() < 1e-6);
        assert!((sim.coefficients[1] - 0.5).abs() < 1e-6);
        assert!((sim.r_squared - 1.0).abs() < 1e-9, "r2 {}", sim.r_squared);

        for (c, cost) in &samples[..10] {
            assert!((sim.predict(&space, c) - cost).abs() < 1e-6);
        }
    }

    #[test]
    fn unresolvable_inputs_are_dropped_and_device_inputs_count_devices() {
        let space = full_space();
        let samples = sampled(&space, 60, 42);
        let spec = SimulatorSpec::new("mixed", &["pp", "warp_threads", "a100"]);
        let sim = fit_simulator(&space, &spec, &samples, 3).expect("fit succeeds");
        assert_eq!(
            sim.inputs,
            vec![
                SimInput::Feature("pp".into()),
                SimInput::Device("a100".into())
            ],
            "unknown names vanish, device classes resolve"
        );

        let (c, _) = &samples[0];
        let world = space.world_size(&c.sparse);
        assert_eq!(
            SimInput::Device("a100".into()).value(&space, c),
            world.min(8) as f64,
            "the fast class fills first"
        );
    }

    #[test]
    fn degenerate_columns_fall_back_to_ridge() {
        let space = full_space();
        // Every sample keeps ar at false, so the ar column is identically
        // zero and the plain normal equations are singular.
        let mut samples = sampled(&space, 60, 43);
        let ar = space.sparse_slot("ar").unwrap();
        for (c, cost) in &mut samples {
            c.sparse.values[ar] = Some(Value::Bool(false));
            *cost = linear_cost(&space, c);
        }
        let spec = SimulatorSpec::new("degenerate", &["pp", "ar", "tp_comm"]);
        let sim = fit_simulator(&space, &spec, &samples, 5).expect("ridge path fits");
        assert!(sim.regularized, "zero column must trigger the ridge retry");
        assert!(
            (sim.r_squared - 1.0).abs() < 1e-6,
            "tiny ridge still fits the linear target, r2 {}",
            sim.r_squared
        );
    }

    #[test]
    fn insufficient_samples_are_rejected() {
        let space = full_space();
        let samples = sampled(&space, 3, 44);
        let spec = SimulatorSpec::new("tiny", &["pp", "tp", "dp"]);
        assert!(matches!(
            fit_simulator(&space, &spec, &samples, 1),
            Err(EvaluatorError::InsufficientData { .. })
        ));
    }

    #[test]
    fn holdout_is_a_fifth_with_a_floor_of_one() {
        assert_eq!(holdout_size(4), 1);
        assert_eq!(holdout_size(5), 1);
        assert_eq!(holdout_size(10), 2);
        assert_eq!(holdout_size(200), 40);
    }

    fn stub_sim(name: &str, r2: f64) -> LinearSimulator {
        LinearSimulator {
            name: name.into(),
            inputs: vec![],
            coefficients: vec![],
            intercept: 1.0,
            r_squared: r2,
            regularized: false,
        }
    }

    #[test]
    fn ensemble_weights_clip_negative_scores() {
        let e = SimulatorEnsemble::new(vec![
            stub_sim("a", 0.8),
            stub_sim("b", 0.2),
            stub_sim("c", -0.3),
            stub_sim("d", 0.1),
        ]);
        let expected = [8.0 / 11.0, 2.0 / 11.0, 0.0, 1.0 / 11.0];
        for (w, want) in e.weights.iter().zip(expected) {
            assert!((w - want).abs() < 1e-12, "weight {w} vs {want}");
        }
        assert!(e.is_usable());
    }

    #[test]
    fn all_nonpositive_scores_make_the_ensemble_unusable() {
        let space = full_space();
        let e = SimulatorEnsemble::new(vec![stub_sim("a", -0.1), stub_sim("b", 0.0)]);
        assert!(!e.is_usable());
        let c = Configuration {
            sparse: space.default_sparse(),
            dense: space.project(&space.default_dense(), &space.mask(&space.default_sparse())),
        };
        assert!(e.predict(&space, &c).is_none());
        let oracle = EnsembleOracle::new(e);
        assert!(matches!(
            oracle.evaluate(&space, &c),
            Err(OracleError::Unavailable)
        ));
    }

    #[test]
    fn cache_never_downgrades_real_knowledge() {
        let mut cache = EvaluationCache::default();
        cache.store_sim("k", 10.0);
        assert_eq!(
            cache.lookup("k", Fidelity::Simulated),
            Some(CostOutcome::Cost(10.0))
        );
        assert_eq!(cache.lookup("k", Fidelity::Real), None, "sim never serves real");

        cache.store_real("k", CostOutcome::Cost(12.0));
        assert_eq!(
            cache.lookup("k", Fidelity::Simulated),
            Some(CostOutcome::Cost(12.0)),
            "real knowledge answers simulated lookups"
        );

        cache.store_sim("k", 9.0);
        assert_eq!(
            cache.lookup("k", Fidelity::Real),
            Some(CostOutcome::Cost(12.0)),
            "a later sim write cannot displace the real outcome"
        );
        assert_eq!(cache.sim("k"), Some(9.0));

        cache.store_real("j", CostOutcome::Infeasible);
        assert_eq!(cache.lookup("j", Fidelity::Real), Some(CostOutcome::Infeasible));
    }

    /// Two fixed configurations used by the checkpoint tests.
    fn two_configs(space: &ConfigSpace) -> (Configuration, Configuration) {
        let defaults = space.default_sparse();
        let mut other = defaults.clone();
        let pp = space.sparse_slot("pp").unwrap();
        other.values[pp] = Some(Value::Int(2));
        let mk = |s: &crate::space::SparseAssignment| Configuration {
            sparse: s.clone(),
            dense: space.project(&space.default_dense(), &space.mask(s)),
        };
        (mk(&defaults), mk(&other))
    }

    fn pp_of(space: &ConfigSpace, c: &Configuration) -> i64 {
        space.value_of(c, "pp").unwrap().as_int().unwrap()
    }

    #[test]
    fn checkpoint_mape_matches_the_hand_computation() {
        let space = full_space();
        let (c1, c2) = two_configs(&space);
        let sim = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(if pp_of(s, c) == 1 { 100.0 } else { 200.0 }))
        });
        let real = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(if pp_of(s, c) == 1 { 110.0 } else { 180.0 }))
        });
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 1, 0.1, Clock::model());

        let b0 = ev.evaluate_batch(0, std::slice::from_ref(&c1));
        assert!(!b0.switch_signal, "iteration zero never validates");
        assert!(ev.mape_log().is_empty());

        let b1 = ev.evaluate_batch(1, std::slice::from_ref(&c2));
        assert!(
            b1.switch_signal,
            "mape 0.10101 exceeds the 0.1 tolerance"
        );
        let checkpoint = ev.mape_log().last().unwrap();
        let want = (10.0 / 110.0 + 20.0 / 180.0) / 2.0;
        assert!((checkpoint.mape.unwrap() - want).abs() < 1e-12);
        assert_eq!(checkpoint.pairs, 2, "best simulated plus batch argmin");
        assert_eq!(ev.real_evals(), 2, "each probe consumed one real call");
    }

    #[test]
    fn infeasible_probes_count_as_total_misses() {
        let space = full_space();
        let (c1, _) = two_configs(&space);
        let sim = FnOracle(|_: &ConfigSpace, _: &Configuration| Ok(CostOutcome::Cost(50.0)));
        let real = FnOracle(|_: &ConfigSpace, _: &Configuration| Ok(CostOutcome::Infeasible));
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 1, 0.5, Clock::model());
        let b = ev.evaluate_batch(1, std::slice::from_ref(&c1));
        assert!(b.switch_signal, "error 1.0 exceeds any sane tolerance");
        assert_eq!(ev.mape_log().last().unwrap().mape, Some(1.0));
    }

    #[test]
    fn failed_probes_defer_the_decision() {
        let space = full_space();
        let (c1, _) = two_configs(&space);
        let sim = FnOracle(|_: &ConfigSpace, _: &Configuration| Ok(CostOutcome::Cost(50.0)));
        let real = FnOracle(|_: &ConfigSpace, _: &Configuration| {
            Err(OracleError::Failed("flaky".into()))
        });
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 1, 0.1, Clock::model());
        let b = ev.evaluate_batch(1, std::slice::from_ref(&c1));
        assert!(!b.switch_signal, "no usable probe, no verdict");
        let checkpoint = ev.mape_log().last().unwrap();
        assert_eq!(checkpoint.mape, None);
        assert_eq!(checkpoint.pairs, 0);
    }

    #[test]
    fn switch_is_one_way_and_reuses_cached_real_outcomes() {
        let space = full_space();
        let (c1, c2) = two_configs(&space);
        let sim = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(if pp_of(s, c) == 1 { 100.0 } else { 200.0 }))
        });
        let real = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(if pp_of(s, c) == 1 { 110.0 } else { 180.0 }))
        });
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 1, 0.05, Clock::model());
        let mut bandit = BanditState::new(1.414, 0.995);
        bandit.record(crate::bandit::Arm::Sparse, 0.8);
        bandit.record(crate::bandit::Arm::Sparse, 0.8);

        ev.evaluate_batch(0, &[c1.clone(), c2.clone()]);
        let b = ev.evaluate_batch(1, &[c1.clone(), c2.clone()]);
        assert!(b.switch_signal);

        let reval = ev.switch_fidelity(&mut bandit, 0.25, 5, 1);
        assert_eq!(ev.mode(), Fidelity::Real);
        assert!(ev.switch_record().is_some());
        assert_eq!(reval.len(), 2, "only two distinct configurations exist");
        assert_eq!(
            space.canonical_key(&reval[0]),
            space.canonical_key(&c1),
            "re-validation list is ordered by simulated cost"
        );
        assert!((bandit.n(crate::bandit::Arm::Sparse) - 0.5).abs() < 1e-12);
        assert!(
            (bandit.mean(crate::bandit::Arm::Sparse).unwrap() - 0.8).abs() < 1e-12,
            "scaling preserves the mean"
        );

        let before = ev.real_evals();
        let out = ev.evaluate_one(&c1).unwrap();
        assert_eq!(out, CostOutcome::Cost(110.0));
        assert_eq!(ev.real_evals(), before, "checkpoint probe already paid for c1");
    }

    #[test]
    fn model_clock_charges_by_outcome() {
        let space = full_space();
        let (c1, c2) = two_configs(&space);
        let sim = FnOracle(|_: &ConfigSpace, _: &Configuration| Ok(CostOutcome::Cost(42.0)));
        let real = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(if pp_of(s, c) == 1 {
                CostOutcome::Cost(7.5)
            } else {
                CostOutcome::Infeasible
            })
        });
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 100, 0.1, Clock::model());
        ev.evaluate_one(&c1).unwrap();
        assert!((ev.elapsed_seconds() - SIM_COST_SECONDS).abs() < 1e-12);
        ev.evaluate_real(&c1).unwrap();
        assert!((ev.elapsed_seconds() - (SIM_COST_SECONDS + 7.5)).abs() < 1e-12);
        ev.evaluate_real(&c2).unwrap();
        assert!(
            (ev.elapsed_seconds() - (SIM_COST_SECONDS + 7.5)).abs() < 1e-12,
            "infeasible outcomes charge nothing"
        );
        ev.evaluate_real(&c1).unwrap();
        assert_eq!(ev.real_evals(), 2, "cache hits are free");
    }

    #[test]
    fn perfect_simulators_never_trip_the_checkpoint() {
        let space = full_space();
        let samples = sampled(&space, 100, 45);
        let ensemble = {
            let spec = SimulatorSpec::new("exact", &["pp", "tp_comm"]);
            let sim = fit_simulator(&space, &spec, &samples, 11).unwrap();
            SimulatorEnsemble::new(vec![sim])
        };
        let real = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(linear_cost(s, c)))
        });
        let mut ev = AdaptiveEvaluator::new(
            &space,
            &real,
            Some(Box::new(EnsembleOracle::new(ensemble))),
            5,
            0.1,
            Clock::model(),
        );
        let mut rng = StdRng::seed_from_u64(9);
        for t in 0..60 {
            let sparse = space.sample_sparse(&mut rng).unwrap();
            let dense = space.project(&space.sample_dense_raw(&mut rng), &space.mask(&sparse));
            let c = Configuration { sparse, dense };
            let b = ev.evaluate_batch(t, std::slice::from_ref(&c));
            assert!(!b.switch_signal, "exact model must stay within tolerance at t={t}");
        }
        assert!(ev.mape_log().iter().all(|cp| cp.mape.unwrap_or(0.0) < 1e-6));
    }

    #[test]
    fn incumbents_track_each_fidelity_separately() {
        let space = full_space();
        let (c1, c2) = two_configs(&space);
        let real = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(linear_cost(s, c)))
        });
        let sim = FnOracle(|s: &ConfigSpace, c: &Configuration| {
            Ok(CostOutcome::Cost(linear_cost(s, c) / 2.0))
        });
        let mut ev =
            AdaptiveEvaluator::new(&space, &real, Some(Box::new(sim)), 10, 0.5, Clock::model());

        ev.evaluate_one(&c1).unwrap();
        ev.evaluate_one(&c2).unwrap();
        let sim1 = linear_cost(&space, &c1) / 2.0;
        let sim2 = linear_cost(&space, &c2) / 2.0;
        assert_eq!(ev.first_cost(), Some(sim1), "first finite cost is remembered");
        let (best, cfg) = ev.best_any().expect("a finite cost was seen");
        assert_eq!(*best, sim1.min(sim2));
        assert_eq!(pp_of(&space, cfg), 1, "the cheaper structure is pp=1");
        assert!(ev.best_real().is_none(), "no real evaluation happened yet");

        ev.evaluate_real(&c2).unwrap();
        let (best_real, _) = ev.best_real().expect("real evaluation succeeded");
        assert_eq!(*best_real, linear_cost(&space, &c2));
        let (best_any, _) = ev.best_any().expect("still tracked");
        assert_eq!(
            *best_any,
            sim1.min(sim2),
            "the cheaper simulated cost keeps the any-fidelity incumbent"
        );
    }
}
