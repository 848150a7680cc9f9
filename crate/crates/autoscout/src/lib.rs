//! Optimizer for structured configuration spaces of the kind that show up
//! when tuning distributed ML systems: a handful of categorical, mutually
//! constrained "structural" knobs (parallelism degrees, recompute switches)
//! surrounded by graded numeric knobs (bucket sizes, chunk counts) whose
//! very existence depends on the structural choices.
//!
//! The search couples four pieces:
//!
//! * [`sparse`]: Monte Carlo tree search over feature-ordered decision
//!   trees, warm-started by a halving tournament across candidate feature
//!   orderings.
//! * [`dense`]: coordinate-wise refinement with step-size momentum over the
//!   grid knobs that the current structure leaves active.
//! * [`bandit`] + [`orchestrator`]: a decaying-exploration UCB1 rule that
//!   splits iterations between the two optimizers, fed by a
//!   difference-of-differences credit estimator over a 2x2 evaluation batch.
//! * [`evaluator`]: an R^2-weighted ensemble of linear cost simulators with
//!   a one-way switch to real profiling once simulator error exceeds a
//!   tolerance.
//!
//! [`bench`] provides a synthetic distributed-training cost model, baseline
//! searchers, and scenario drivers; [`cli`] exposes everything as the
//! `autoscout` binary.

pub mod bandit;
pub mod bench;
pub mod cli;
pub mod dense;
pub mod evaluator;
pub mod oracle;
pub mod orchestrator;
pub mod space;
pub mod sparse;
pub mod trace;
