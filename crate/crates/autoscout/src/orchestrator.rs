//! The top-level search loop. A run warms up with an ordering tournament,
//! then repeatedly builds a 2x2 evaluation batch from the current base pair
//! and the two optimizers' candidates, splits the observed improvement
//! between the sparse and dense searches with a difference-of-differences
//! estimate, and lets a decaying bandit decide which optimizer proposes
//! next. Fidelity is delegated to [`crate::evaluator`]: runs start on the
//! simulator ensemble when one is supplied and switch to the real oracle
//! for good once the simulators drift out of tolerance.

use crate::bandit::{Arm, BanditState};
use crate::dense::{DenseSearch, MAX_STEP};
use crate::evaluator::{AdaptiveEvaluator, Clock, Fidelity, MapeCheckpoint, SwitchRecord};
use crate::oracle::{CostOracle, CostOutcome};
use crate::space::{ConfigSpace, Configuration, DenseAssignment, SparseAssignment};
use crate::sparse::{MctsTree, Tournament, TournamentResult, TreeOrdering, TreeStats};
use crate::trace::TraceRow;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Which parts of the optimizer are enabled. The reduced variants exist for
/// baseline comparisons: each one removes exactly one ingredient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchVariant {
    /// Everything on: tournament, both optimizers, bandit, simulators.
    Full,
    /// Dense features pinned to their defaults; only the tree search moves.
    SparseOnly,
    /// Sparse structure pinned to the default feasible assignment; only the
    /// coordinate refinement moves.
    DenseOnly,
    /// Both optimizers active but alternating round-robin instead of being
    /// scheduled by the bandit.
    NoOrchestrator,
    /// Full search driven by the real oracle from iteration 0.
    NoSimulators,
}

impl SearchVariant {
    pub const ALL: [SearchVariant; 5] = [
        SearchVariant::Full,
        SearchVariant::SparseOnly,
        SearchVariant::DenseOnly,
        SearchVariant::NoOrchestrator,
        SearchVariant::NoSimulators,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SearchVariant::Full => "full",
            SearchVariant::SparseOnly => "sparse_only",
            SearchVariant::DenseOnly => "dense_only",
            SearchVariant::NoOrchestrator => "no_orchestrator",
            SearchVariant::NoSimulators => "no_simulators",
        }
    }
}

impl FromStr for SearchVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<SearchVariant, String> {
        SearchVariant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| format!("unknown search variant '{s}'"))
    }
}

/// Knobs for a single run. Every field has a serde default, so a run file
/// only needs to spell out what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Iteration budget; each iteration spends one 2x2 batch.
    pub budget_iters: u64,
    /// Optional time budget in seconds (modeled or wall, per the clock),
    /// checked at the top of every iteration.
    pub budget_seconds: Option<f64>,
    pub seed: u64,
    /// Tournament field size; 1 skips the warm-up entirely.
    pub k_tournament: usize,
    /// Exploration constant of the tree search.
    pub uct_c: f64,
    /// Initial bandit exploration coefficient.
    pub c0: f64,
    /// Per-iteration decay of the bandit exploration coefficient.
    pub gamma: f64,
    /// Simulator validation period in iterations.
    pub tau: u64,
    /// Mean relative error above which the simulators are abandoned.
    pub epsilon: f64,
    /// Discount applied to the bandit statistics on the fidelity switch.
    pub lambda: f64,
    /// How many of the best simulated configurations to re-evaluate on the
    /// real oracle immediately after the switch.
    pub k_reval: usize,
    /// Dense momentum cap in grid positions per move.
    pub step_cap: usize,
    pub variant: SearchVariant,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            budget_iters: 200,
            budget_seconds: None,
            seed: 0,
            k_tournament: 8,
            uct_c: std::f64::consts::SQRT_2,
            c0: std::f64::consts::SQRT_2,
            gamma: 0.995,
            tau: 10,
            epsilon: 0.2,
            lambda: 0.25,
            k_reval: 5,
            step_cap: MAX_STEP,
            variant: SearchVariant::Full,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |msg: &str| Err(OrchestratorError::InvalidConfig(msg.to_string()));
        if self.tau < 1 {
            return fail("tau must be at least 1");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return fail("epsilon must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return fail("lambda must lie in (0, 1]");
        }
        if self.k_tournament == 0 {
            return fail("k_tournament must be at least 1");
        }
        if self.step_cap == 0 {
            return fail("step_cap must be at least 1");
        }
        if self.c0.is_nan() || self.c0 < 0.0 {
            return fail("c0 must be non-negative");
        }
        if self.uct_c.is_nan() || self.uct_c < 0.0 {
            return fail("uct_c must be non-negative");
        }
        if let Some(b) = self.budget_seconds {
            if b.is_nan() || b <= 0.0 {
                return fail("budget_seconds must be positive");
            }
        }
        Ok(())
    }
}

/// The four configurations of one iteration in (bb, bc, cb, cc) order: the
/// first letter picks the sparse side (base or candidate), the second the
/// dense side. Dense assignments are re-projected onto the mask of the
/// sparse assignment they are paired with, so every cell is feasible.
pub fn build_batch(
    space: &ConfigSpace,
    s_base: &SparseAssignment,
    s_cand: &SparseAssignment,
    x_base: &DenseAssignment,
    x_cand: &DenseAssignment,
) -> [Configuration; 4] {
    let mask_base = space.mask(s_base);
    let mask_cand = space.mask(s_cand);
    let batch = [
        Configuration {
            sparse: s_base.clone(),
            dense: space.project(x_base, &mask_base),
        },
        Configuration {
            sparse: s_base.clone(),
            dense: space.project(x_cand, &mask_base),
        },
        Configuration {
            sparse: s_cand.clone(),
            dense: space.project(x_base, &mask_cand),
        },
        Configuration {
            sparse: s_cand.clone(),
            dense: space.project(x_cand, &mask_cand),
        },
    ];
    debug_assert!(
        batch.iter().all(|c| space.is_feasible(c)),
        "projection keeps every batch cell feasible"
    );
    batch
}

/// Marginal improvements credited to each optimizer from one batch, plus the
/// normalized rewards handed to the bandit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attribution {
    pub delta_sparse: f64,
    pub delta_dense: f64,
    pub reward_sparse: f64,
    pub reward_dense: f64,
}

/// Difference-of-differences split of a batch's costs, `None` marking an
/// infeasible or unevaluated cell. Each delta averages the contrasts whose
/// both ends are finite (no contrast available means 0). Rewards are
/// `clip(delta / c_bb, 0, 1)`; a missing cell zeroes the reward of every arm
/// whose candidate produced it, and a missing base/base cell zeroes both.
pub fn attribute(costs: &[Option<f64>; 4]) -> Attribution {
    let [bb, bc, cb, cc] = *costs;
    let contrast = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    let mean = |pair: [Option<f64>; 2]| {
        let present: Vec<f64> = pair.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let delta_sparse = mean([contrast(bb, cb), contrast(bc, cc)]);
    let delta_dense = mean([contrast(bb, bc), contrast(cb, cc)]);
    let reward = |delta: f64, cells: [Option<f64>; 3]| match cells {
        [Some(base), Some(_), Some(_)] if base > 0.0 => (delta / base).clamp(0.0, 1.0),
        _ => 0.0,
    };
    Attribution {
        delta_sparse,
        delta_dense,
        reward_sparse: reward(delta_sparse, [bb, cb, cc]),
        reward_dense: reward(delta_dense, [bb, bc, cc]),
    }
}

/// Index of the cheapest finite cell, ties resolved toward the earliest
/// position in (bb, bc, cb, cc) order.
pub fn argmin_cell(costs: &[Option<f64>; 4]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in costs.iter().enumerate() {
        if let Some(c) = *c {
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((i, c));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// One loop iteration: the trace row plus the incumbents the run would
/// report if it stopped right after this iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub row: TraceRow,
    pub best_any: Option<(f64, Configuration)>,
    pub best_real: Option<(f64, Configuration)>,
}

/// Tree-search diagnostics collected over a run.
#[derive(Debug, Clone, Serialize)]
pub struct TreeReport {
    /// Per-tree statistics at the end of the warm-up tournament (empty when
    /// the tournament was skipped).
    pub warmup: Vec<TreeStats>,
    pub winner_index: usize,
    /// The winning tree after the main loop finished growing it.
    pub winner: TreeStats,
}

/// Everything a finished run exposes.
#[derive(Debug)]
pub struct RunOutcome {
    /// Cheapest real-validated configuration, the run's actual answer.
    pub best: Option<(f64, Configuration)>,
    /// Cheapest configuration at any fidelity, kept for diagnosis when the
    /// simulators were never contradicted.
    pub best_any: Option<(f64, Configuration)>,
    pub iterations: Vec<IterationRecord>,
    pub tournament: Option<TournamentResult>,
    pub trees: TreeReport,
    pub switch: Option<SwitchRecord>,
    pub mape_log: Vec<MapeCheckpoint>,
    pub real_evals: u64,
    pub sim_evals: u64,
    pub elapsed_seconds: f64,
    /// True when the loop stopped on the time budget rather than the
    /// iteration budget.
    pub stopped_by_time: bool,
}

impl RunOutcome {
    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.iterations.iter().map(|r| r.row.clone()).collect()
    }
}

fn best_cost_now(evaluator: &AdaptiveEvaluator<'_>) -> Option<f64> {
    match evaluator.mode() {
        Fidelity::Real => evaluator.best_real().map(|(c, _)| *c),
        Fidelity::Simulated => evaluator.best_any().map(|(c, _)| *c),
    }
}

fn snapshot(evaluator: &AdaptiveEvaluator<'_>, row: TraceRow) -> IterationRecord {
    IterationRecord {
        row,
        best_any: evaluator.best_any().cloned(),
        best_real: evaluator.best_real().cloned(),
    }
}

/// Run the whole workflow against `real`, optionally warm-started on a
/// simulator source. `orderings` overrides the generated tournament field
/// when given (its length becomes the field size); `clock` decides whether
/// the time budget is charged from modeled costs or wall time.
///
/// The reported best is always re-validated with a real evaluation before
/// return; `best` is `None` only when no configuration ever produced a
/// finite real cost.
pub fn run(
    space: &ConfigSpace,
    cfg: &RunConfig,
    real: &dyn CostOracle,
    sim: Option<Box<dyn CostOracle>>,
    orderings: Option<Vec<TreeOrdering>>,
    clock: Clock,
) -> Result<RunOutcome, OrchestratorError> {
    cfg.validate()?;
    let sim = if cfg.variant == SearchVariant::NoSimulators {
        None
    } else {
        sim
    };
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut evaluator = AdaptiveEvaluator::new(space, real, sim, cfg.tau, cfg.epsilon, clock);
    let mut bandit = BanditState::new(cfg.c0, cfg.gamma);

    let sparse_live = cfg.variant != SearchVariant::DenseOnly;
    let dense_live = cfg.variant != SearchVariant::SparseOnly;

    let orderings = match orderings {
        Some(o) if !o.is_empty() => o,
        _ => TreeOrdering::default_set(space, cfg.k_tournament, &mut rng),
    };
    let trees: Vec<MctsTree> = orderings
        .into_iter()
        .map(|o| MctsTree::new(space, o, cfg.uct_c))
        .collect();

    // Phase 0: the ordering tournament. Each proposal is paired with the
    // dense defaults projected onto its mask; rewards are normalized against
    // the first finite cost of the run.
    let mut tournament_log = None;
    let mut warmup_stats = Vec::new();
    let mut winner_index = 0;
    let mut tree = if sparse_live && trees.len() > 1 {
        let mut tournament = Tournament::new(trees);
        let result = tournament.run(space, &mut rng, |s| {
            let config = Configuration {
                sparse: s.clone(),
                dense: space.project(&space.default_dense(), &space.mask(s)),
            };
            match evaluator.evaluate_one(&config) {
                Ok(CostOutcome::Cost(c)) => evaluator.first_cost().map_or(1.0, |r| r / c),
                _ => 0.0,
            }
        });
        warmup_stats = tournament.stats(space);
        winner_index = result.winner;
        tournament_log = Some(result);
        let mut all = tournament.into_trees();
        all.swap_remove(winner_index)
    } else {
        trees
            .into_iter()
            .next()
            .expect("an ordering set is never empty")
    };

    // Phase 1: initial pairs. The base structure is the winner tree's best
    // path (the default-preferring completion for a fresh tree); the dense
    // base starts from projected defaults.
    let mut s_base = tree.best_assignment(space);
    let mut dense = DenseSearch::with_step_cap(space, space.mask(&s_base), cfg.step_cap);
    let mut s_cand = if sparse_live {
        tree.propose(space, &mut rng)
    } else {
        s_base.clone()
    };
    let mut x_cand = if dense_live {
        dense.propose()
    } else {
        dense.current().clone()
    };

    let mut records = Vec::with_capacity(cfg.budget_iters as usize + 1);
    let fidelity0 = evaluator.mode();
    let initial = Configuration {
        sparse: s_base.clone(),
        dense: dense.current().clone(),
    };
    let outcome0 = evaluator.evaluate_one(&initial);
    records.push(snapshot(
        &evaluator,
        TraceRow {
            iteration: 0,
            wall_seconds: evaluator.elapsed_seconds(),
            arm_selected: None,
            fidelity: fidelity0,
            c_bb: outcome0.ok(),
            c_bc: None,
            c_cb: None,
            c_cc: None,
            delta_sparse: None,
            delta_dense: None,
            best_cost: best_cost_now(&evaluator),
            real_evals: evaluator.real_evals(),
            sim_evals: evaluator.sim_evals(),
        },
    ));

    // Phase 2: the batched search loop.
    let mut stopped_by_time = false;
    for t in 1..=cfg.budget_iters {
        if let Some(limit) = cfg.budget_seconds {
            if evaluator.elapsed_seconds() >= limit {
                stopped_by_time = true;
                break;
            }
        }
        let arm = match cfg.variant {
            SearchVariant::SparseOnly => Arm::Sparse,
            SearchVariant::DenseOnly => Arm::Dense,
            SearchVariant::NoOrchestrator => {
                if t % 2 == 1 {
                    Arm::Sparse
                } else {
                    Arm::Dense
                }
            }
            SearchVariant::Full | SearchVariant::NoSimulators => bandit.select_arm(t),
        };

        let fidelity = evaluator.mode();
        let x_base = dense.current().clone();
        let batch = build_batch(space, &s_base, &s_cand, &x_base, &x_cand);
        let evaluation = evaluator.evaluate_batch(t, &batch);
        let costs: [Option<f64>; 4] =
            std::array::from_fn(|i| evaluation.outcomes[i].as_ref().ok().and_then(|o| o.finite()));
        let cell = |i: usize| evaluation.outcomes[i].as_ref().ok().copied();

        // An out-of-tolerance checkpoint abandons the simulators right away;
        // the most promising simulated configurations get real costs so the
        // incumbent survives the change of scale.
        if evaluation.switch_signal {
            for config in evaluator.switch_fidelity(&mut bandit, cfg.lambda, cfg.k_reval, t) {
                let _ = evaluator.evaluate_real(&config);
            }
        }

        // A failed oracle call invalidates the whole contrast frame: record
        // the iteration, consume the budget, and retry the same pairs next
        // time (the successful cells stay cached).
        if evaluation.outcomes.iter().any(|o| o.is_err()) {
            records.push(snapshot(
                &evaluator,
                TraceRow {
                    iteration: t,
                    wall_seconds: evaluator.elapsed_seconds(),
                    arm_selected: Some(arm),
                    fidelity,
                    c_bb: cell(0),
                    c_bc: cell(1),
                    c_cb: cell(2),
                    c_cc: cell(3),
                    delta_sparse: None,
                    delta_dense: None,
                    best_cost: best_cost_now(&evaluator),
                    real_evals: evaluator.real_evals(),
                    sim_evals: evaluator.sim_evals(),
                },
            ));
            continue;
        }

        let attribution = attribute(&costs);
        let argmin = argmin_cell(&costs);
        let base_feasible = costs[0].is_some();
        let improved_dense = base_feasible && matches!(argmin, Some(1) | Some(3));
        let improved_sparse = base_feasible && matches!(argmin, Some(2) | Some(3));

        bandit.record(
            arm,
            match arm {
                Arm::Sparse => attribution.reward_sparse,
                Arm::Dense => attribution.reward_dense,
            },
        );

        // The tree learns from every batch since both candidate cells carry
        // its proposal, whichever arm was scheduled.
        if sparse_live {
            let best_cand = [costs[2], costs[3]]
                .into_iter()
                .flatten()
                .fold(None::<f64>, |acc, c| Some(acc.map_or(c, |a| a.min(c))));
            let reward = match (evaluator.first_cost(), best_cand) {
                (Some(r), Some(c)) if c > 0.0 => r / c,
                _ => 0.0,
            };
            tree.backpropagate(space, &s_cand, reward);
        }

        match argmin {
            Some(i) if base_feasible => {
                // Bases advance to the winning cell's components.
                if dense_live {
                    dense.update(improved_dense, &batch[i].dense);
                }
                s_base = batch[i].sparse.clone();
                dense.reproject(space, space.mask(&s_base));
            }
            _ => {
                // The base pair itself is infeasible; its contrasts cannot
                // be trusted, so re-seed the base from the tree.
                if dense_live {
                    dense.update(false, &x_cand);
                }
                if sparse_live {
                    s_base = tree.propose(space, &mut rng);
                }
                dense.reproject(space, space.mask(&s_base));
            }
        }

        // The scheduled arm always proposes fresh; the other side keeps its
        // candidate only while that candidate is winning batches.
        match arm {
            Arm::Sparse => {
                if sparse_live {
                    s_cand = tree.propose(space, &mut rng);
                }
                if dense_live {
                    if !improved_dense {
                        x_cand = dense.propose();
                    }
                } else {
                    x_cand = dense.current().clone();
                }
            }
            Arm::Dense => {
                if dense_live {
                    x_cand = dense.propose();
                } else {
                    x_cand = dense.current().clone();
                }
                if sparse_live && !improved_sparse {
                    s_cand = tree.propose(space, &mut rng);
                }
            }
        }

        records.push(snapshot(
            &evaluator,
            TraceRow {
                iteration: t,
                wall_seconds: evaluator.elapsed_seconds(),
                arm_selected: Some(arm),
                fidelity,
                c_bb: cell(0),
                c_bc: cell(1),
                c_cb: cell(2),
                c_cc: cell(3),
                delta_sparse: Some(attribution.delta_sparse),
                delta_dense: Some(attribution.delta_dense),
                best_cost: best_cost_now(&evaluator),
                real_evals: evaluator.real_evals(),
                sim_evals: evaluator.sim_evals(),
            },
        ));
    }

    // Final re-validation: the any-fidelity incumbent earns a real cost, and
    // the answer is whatever the real oracle liked best.
    if let Some((_, config)) = evaluator.best_any().cloned() {
        let _ = evaluator.evaluate_real(&config);
    }

    Ok(RunOutcome {
        best: evaluator.best_real().cloned(),
        best_any: evaluator.best_any().cloned(),
        iterations: records,
        tournament: tournament_log,
        trees: TreeReport {
            warmup: warmup_stats,
            winner_index,
            winner: tree.stats(space),
        },
        switch: evaluator.switch_record(),
        mape_log: evaluator.mape_log().to_vec(),
        real_evals: evaluator.real_evals(),
        sim_evals: evaluator.sim_evals(),
        elapsed_seconds: evaluator.elapsed_seconds(),
        stopped_by_time,
    })
}
