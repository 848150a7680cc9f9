//! Monte-Carlo tree search over the sparse features, plus the tournament of
//! feature orderings used to warm-start it.
//!
//! A tree fixes one decision order over the sparse features. Depth `d` nodes
//! decide the `d`-th feature of that order; an edge carries one candidate
//! value (or the explicit "inactive" choice for a gated-off feature). Each
//! node stores only candidates that provably extend to a feasible full
//! assignment, so descents and rollouts never dead-end. Proposals follow
//! UCT descent with expansion of the first untried candidate and a uniform
//! random completion below it; rewards are credited to the whole root-leaf
//! path.
//!
//! Because feature orderings change how quickly credit concentrates, a short
//! tournament races trees with different orderings, halving the field by
//! cumulative proposal reward each round, and hands the winner to the main
//! search loop.

use rand::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::space::{ConfigSpace, SparseAssignment, Value};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("ordering references unknown sparse feature `{0}`")]
    UnknownFeature(String),
    #[error("ordering lists feature `{0}` twice")]
    DuplicateFeature(String),
    #[error("ordering is missing sparse feature `{0}`")]
    MissingFeature(String),
    #[error("failed to read orderings file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid orderings document: {0}")]
    Schema(String),
}

/// A decision order over the sparse feature slots. Orders are always
/// dependency-consistent: a feature appears after every feature its
/// activation predicate references, so candidate computation can resolve
/// gates by looking only at already-decided slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeOrdering {
    slots: Vec<usize>,
}

impl TreeOrdering {
    /// Declaration order. Valid as-is: predicates only reference features
    /// declared earlier.
    pub fn declaration(space: &ConfigSpace) -> TreeOrdering {
        TreeOrdering {
            slots: (0..space.sparse_count()).collect(),
        }
    }

    /// Reverse declaration order, repaired for dependencies.
    pub fn reversed(space: &ConfigSpace) -> TreeOrdering {
        let desired: Vec<usize> = (0..space.sparse_count()).rev().collect();
        TreeOrdering {
            slots: repair(space, &desired),
        }
    }

    /// Features named by global constraints first (declaration order within
    /// each group), repaired for dependencies. Deciding constrained features
    /// early lets the feasibility pruning cut the most branches.
    pub fn constraint_first(space: &ConfigSpace) -> TreeOrdering {
        let n = space.sparse_count();
        let mut constrained = vec![false; n];
        for c in space.constraints() {
            let names: Vec<&String> = match c {
                crate::space::GlobalConstraint::ProductLeDevices { features } => {
                    features.iter().collect()
                }
                crate::space::GlobalConstraint::Divides { a, b } => vec![a, b],
            };
            for name in names {
                if let Some(slot) = space.sparse_slot(name) {
                    constrained[slot] = true;
                }
            }
        }
        let mut desired: Vec<usize> = (0..n).filter(|&s| constrained[s]).collect();
        desired.extend((0..n).filter(|&s| !constrained[s]));
        TreeOrdering {
            slots: repair(space, &desired),
        }
    }

    /// Uniform random permutation, repaired for dependencies.
    pub fn shuffled<R: Rng>(space: &ConfigSpace, rng: &mut R) -> TreeOrdering {
        let mut desired: Vec<usize> = (0..space.sparse_count()).collect();
        desired.shuffle(rng);
        TreeOrdering {
            slots: repair(space, &desired),
        }
    }

    /// Ordering from explicit feature names. Every sparse feature must
    /// appear exactly once; dependency repair is applied afterwards, so the
    /// realized order may differ from the requested one when the request
    /// places a gated feature before its gate.
    pub fn from_names(space: &ConfigSpace, names: &[String]) -> Result<TreeOrdering, SparseError> {
        let n = space.sparse_count();
        let mut desired = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        for name in names {
            let slot = space
                .sparse_slot(name)
                .ok_or_else(|| SparseError::UnknownFeature(name.clone()))?;
            if seen[slot] {
                return Err(SparseError::DuplicateFeature(name.clone()));
            }
            seen[slot] = true;
            desired.push(slot);
        }
        if let Some(slot) = seen.iter().position(|&s| !s) {
            return Err(SparseError::MissingFeature(
                space.sparse_feature(slot).name.clone(),
            ));
        }
        Ok(TreeOrdering {
            slots: repair(space, &desired),
        })
    }

    /// The standard tournament field of `k` orderings: declaration,
    /// constraint-first, reversed, then seeded random shuffles. Shuffles
    /// that collide with an ordering already in the field are retried a few
    /// times, then accepted (tiny spaces may not have `k` distinct orders).
    pub fn default_set<R: Rng>(space: &ConfigSpace, k: usize, rng: &mut R) -> Vec<TreeOrdering> {
        let mut set = Vec::with_capacity(k);
        let fixed = [
            TreeOrdering::declaration(space),
            TreeOrdering::constraint_first(space),
            TreeOrdering::reversed(space),
        ];
        for o in fixed {
            if set.len() == k {
                break;
            }
            if !set.contains(&o) {
                set.push(o);
            }
        }
        while set.len() < k {
            let mut pick = TreeOrdering::shuffled(space, rng);
            for _ in 0..16 {
                if !set.contains(&pick) {
                    break;
                }
                pick = TreeOrdering::shuffled(space, rng);
            }
            set.push(pick);
        }
        set
    }

    /// Parse a JSON array of name arrays, one ordering per entry.
    pub fn load_orderings_file(
        space: &ConfigSpace,
        path: &std::path::Path,
    ) -> Result<Vec<TreeOrdering>, SparseError> {
        let doc = std::fs::read_to_string(path)?;
        let lists: Vec<Vec<String>> =
            serde_json::from_str(&doc).map_err(|e| SparseError::Schema(e.to_string()))?;
        if lists.is_empty() {
            return Err(SparseError::Schema("file declares no orderings".into()));
        }
        lists
            .iter()
            .map(|names| TreeOrdering::from_names(space, names))
            .collect()
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn names(&self, space: &ConfigSpace) -> Vec<String> {
        self.slots
            .iter()
            .map(|&s| space.sparse_feature(s).name.clone())
            .collect()
    }
}

/// Sparse slots a feature's activation predicate references.
fn dependency_slots(space: &ConfigSpace, slot: usize) -> Vec<usize> {
    space
        .sparse_feature(slot)
        .requires
        .iter()
        .filter_map(|c| space.sparse_slot(&c.feature))
        .collect()
}

/// Stable topological adjustment of a desired permutation: repeatedly emit
/// the earliest desired feature whose gate features are all emitted.
/// Declaration order witnesses that progress is always possible.
fn repair(space: &ConfigSpace, desired: &[usize]) -> Vec<usize> {
    let mut emitted = vec![false; space.sparse_count()];
    let mut out = Vec::with_capacity(desired.len());
    while out.len() < desired.len() {
        let next = desired
            .iter()
            .copied()
            .find(|&s| !emitted[s] && dependency_slots(space, s).iter().all(|&d| emitted[d]))
            .expect("validated spaces admit a dependency-consistent order");
        emitted[next] = true;
        out.push(next);
    }
    out
}

/// Depth-first existence check: can the partial assignment, extended in
/// `order[depth..]`, reach a full assignment satisfying every constraint?
fn exists_completion(
    space: &ConfigSpace,
    order: &[usize],
    s: &mut SparseAssignment,
    decided: &mut [bool],
    depth: usize,
) -> bool {
    if depth == order.len() {
        return space.constraints_hold(s);
    }
    let slot = order[depth];
    let candidates = space.sparse_candidates(s, slot, decided);
    decided[slot] = true;
    for v in candidates {
        s.values[slot] = v;
        if exists_completion(space, order, s, decided, depth + 1) {
            s.values[slot] = None;
            decided[slot] = false;
            return true;
        }
    }
    s.values[slot] = None;
    decided[slot] = false;
    false
}

/// Candidate values for the feature decided at `depth`, keeping only values
/// that provably extend to a feasible full assignment. The per-constraint
/// filter alone is a relaxation; checking constraints jointly here is what
/// guarantees trees never grow dead branches.
fn node_candidates(
    space: &ConfigSpace,
    order: &[usize],
    s: &mut SparseAssignment,
    decided: &mut [bool],
    depth: usize,
) -> Vec<Option<Value>> {
    let slot = order[depth];
    let relaxed = space.sparse_candidates(s, slot, decided);
    decided[slot] = true;
    let kept: Vec<Option<Value>> = relaxed
        .into_iter()
        .filter(|&v| {
            s.values[slot] = v;
            exists_completion(space, order, s, decided, depth + 1)
        })
        .collect();
    s.values[slot] = None;
    decided[slot] = false;
    kept
}

/// Uniform random completion of a partial assignment, backtracking when a
/// branch cannot satisfy the global constraints jointly.
fn complete_randomly<R: Rng>(
    space: &ConfigSpace,
    order: &[usize],
    s: &mut SparseAssignment,
    decided: &mut [bool],
    depth: usize,
    rng: &mut R,
) -> bool {
    if depth == order.len() {
        return space.constraints_hold(s);
    }
    let slot = order[depth];
    let mut candidates = space.sparse_candidates(s, slot, decided);
    candidates.shuffle(rng);
    decided[slot] = true;
    for v in candidates {
        s.values[slot] = v;
        if complete_randomly(space, order, s, decided, depth + 1, rng) {
            return true;
        }
    }
    s.values[slot] = None;
    decided[slot] = false;
    false
}

/// Deterministic completion preferring declared defaults, then domain order.
fn complete_preferring_defaults(
    space: &ConfigSpace,
    order: &[usize],
    s: &mut SparseAssignment,
    decided: &mut [bool],
    depth: usize,
) -> bool {
    if depth == order.len() {
        return space.constraints_hold(s);
    }
    let slot = order[depth];
    let mut candidates = space.sparse_candidates(s, slot, decided);
    let default = Some(space.sparse_feature(slot).default);
    if let Some(pos) = candidates.iter().position(|&v| v == default) {
        candidates.swap(0, pos);
        candidates[1..].sort_by(|a, b| a.partial_cmp(b).expect("values are totally ordered"));
    }
    decided[slot] = true;
    for v in candidates {
        s.values[slot] = v;
        if complete_preferring_defaults(space, order, s, decided, depth + 1) {
            return true;
        }
    }
    s.values[slot] = None;
    decided[slot] = false;
    false
}

#[derive(Debug, Clone)]
struct Node {
    depth: usize,
    /// Choices for the feature decided beneath this node; empty at full
    /// depth. Every entry extends to at least one feasible assignment.
    candidates: Vec<Option<Value>>,
    children: Vec<Option<usize>>,
    visits: u64,
    reward: f64,
}

impl Node {
    fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.reward / self.visits as f64
        }
    }
}

/// Summary of one tree, written to the run's tree statistics artifact.
#[derive(Debug, Clone, Serialize)]
pub struct TreeStats {
    pub ordering: Vec<String>,
    pub nodes: usize,
    pub root_visits: u64,
    pub root_mean_reward: f64,
    pub max_depth: usize,
}

/// A search tree over sparse assignments in one fixed feature order.
#[derive(Debug, Clone)]
pub struct MctsTree {
    ordering: TreeOrdering,
    uct_c: f64,
    nodes: Vec<Node>,
}

impl MctsTree {
    pub fn new(space: &ConfigSpace, ordering: TreeOrdering, uct_c: f64) -> MctsTree {
        assert!(uct_c >= 0.0, "exploration constant must be non-negative");
        let mut tree = MctsTree {
            ordering,
            uct_c,
            nodes: Vec::new(),
        };
        let mut s = tree.empty_assignment(space);
        let mut decided = vec![false; space.sparse_count()];
        tree.add_node(space, 0, &mut s, &mut decided);
        tree
    }

    pub fn ordering(&self) -> &TreeOrdering {
        &self.ordering
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_visits(&self) -> u64 {
        self.nodes[0].visits
    }

    fn empty_assignment(&self, space: &ConfigSpace) -> SparseAssignment {
        SparseAssignment {
            values: vec![None; space.sparse_count()],
        }
    }

    fn add_node(
        &mut self,
        space: &ConfigSpace,
        depth: usize,
        s: &mut SparseAssignment,
        decided: &mut [bool],
    ) -> usize {
        let candidates = if depth == self.ordering.slots.len() {
            Vec::new()
        } else {
            node_candidates(space, &self.ordering.slots, s, decided, depth)
        };
        debug_assert!(
            depth == self.ordering.slots.len() || !candidates.is_empty(),
            "candidate filtering must leave no dead interior node"
        );
        let children = vec![None; candidates.len()];
        self.nodes.push(Node {
            depth,
            candidates,
            children,
            visits: 0,
            reward: 0.0,
        });
        self.nodes.len() - 1
    }

    /// UCT score of an already-visited child.
    fn uct(&self, parent: usize, child: usize) -> f64 {
        let p = self.nodes[parent].visits.max(1) as f64;
        let c = &self.nodes[child];
        c.mean() + self.uct_c * (p.ln() / c.visits as f64).sqrt()
    }

    /// Candidate index chosen by UCT among fully expanded children:
    /// unvisited children first (lowest index), then the best score with
    /// ties toward the lowest index.
    fn select_child(&self, node: usize) -> usize {
        let children = &self.nodes[node].children;
        if let Some(i) = children
            .iter()
            .position(|c| self.nodes[c.expect("expanded")].visits == 0)
        {
            return i;
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, c) in children.iter().enumerate() {
            let score = self.uct(node, c.expect("expanded"));
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        best
    }

    /// Propose one feasible sparse assignment: descend by UCT while every
    /// candidate is expanded, expand the first untried candidate otherwise,
    /// and complete the remainder uniformly at random.
    pub fn propose<R: Rng>(&mut self, space: &ConfigSpace, rng: &mut R) -> SparseAssignment {
        let order = self.ordering.slots.clone();
        let mut s = self.empty_assignment(space);
        let mut decided = vec![false; space.sparse_count()];
        let mut cur = 0;
        loop {
            let depth = self.nodes[cur].depth;
            if depth == order.len() {
                return s;
            }
            let slot = order[depth];
            if let Some(ci) = self.nodes[cur].children.iter().position(Option::is_none) {
                s.values[slot] = self.nodes[cur].candidates[ci];
                decided[slot] = true;
                let child = self.add_node(space, depth + 1, &mut s, &mut decided);
                self.nodes[cur].children[ci] = Some(child);
                let done = complete_randomly(space, &order, &mut s, &mut decided, depth + 1, rng);
                debug_assert!(done, "candidates are extensible by construction");
                return s;
            }
            let ci = self.select_child(cur);
            s.values[slot] = self.nodes[cur].candidates[ci];
            decided[slot] = true;
            cur = self.nodes[cur].children[ci].expect("expanded");
        }
    }

    /// Credit `reward` to the entire root-leaf path of `s`, creating any
    /// missing nodes along it. Accepts assignments proposed by other trees;
    /// any feasible assignment lies on exactly one path of every tree.
    pub fn backpropagate(&mut self, space: &ConfigSpace, s: &SparseAssignment, reward: f64) {
        let order = self.ordering.slots.clone();
        let mut partial = self.empty_assignment(space);
        let mut decided = vec![false; space.sparse_count()];
        let mut path = vec![0usize];
        let mut cur = 0;
        for &slot in &order {
            let v = s.values[slot];
            let Some(ci) = self.nodes[cur].candidates.iter().position(|&c| c == v) else {
                debug_assert!(false, "backpropagated assignment must be feasible");
                break;
            };
            partial.values[slot] = v;
            decided[slot] = true;
            let child = match self.nodes[cur].children[ci] {
                Some(c) => c,
                None => {
                    let depth = self.nodes[cur].depth + 1;
                    let c = self.add_node(space, depth, &mut partial, &mut decided);
                    self.nodes[cur].children[ci] = Some(c);
                    c
                }
            };
            path.push(child);
            cur = child;
        }
        for idx in path {
            self.nodes[idx].visits += 1;
            self.nodes[idx].reward += reward;
        }
    }

    /// Best assignment by greedy mean-reward descent over visited children,
    /// finished by a deterministic default-preferring completion once the
    /// visited frontier ends.
    pub fn best_assignment(&self, space: &ConfigSpace) -> SparseAssignment {
        let order = &self.ordering.slots;
        let mut s = self.empty_assignment(space);
        let mut decided = vec![false; space.sparse_count()];
        let mut cur = 0;
        let mut depth = self.nodes[cur].depth;
        while depth < order.len() {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in self.nodes[cur].children.iter().enumerate() {
                let Some(c) = *c else { continue };
                if self.nodes[c].visits == 0 {
                    continue;
                }
                let mean = self.nodes[c].mean();
                if best.is_none_or(|(_, m)| mean > m) {
                    best = Some((i, mean));
                }
            }
            let Some((ci, _)) = best else { break };
            let slot = order[depth];
            s.values[slot] = self.nodes[cur].candidates[ci];
            decided[slot] = true;
            cur = self.nodes[cur].children[ci].expect("expanded");
            depth = self.nodes[cur].depth;
        }
        if depth < order.len() {
            let done = complete_preferring_defaults(space, order, &mut s, &mut decided, depth);
            debug_assert!(done, "every reachable node is extensible");
        }
        s
    }

    pub fn stats(&self, space: &ConfigSpace) -> TreeStats {
        TreeStats {
            ordering: self.ordering.names(space),
            nodes: self.nodes.len(),
            root_visits: self.nodes[0].visits,
            root_mean_reward: self.nodes[0].mean(),
            max_depth: self.nodes.iter().map(|n| n.depth).max().unwrap_or(0),
        }
    }
}

/// One proposal made during the tournament.
#[derive(Debug, Clone, Serialize)]
pub struct ProposalLog {
    pub tree: usize,
    pub key: String,
    pub reward: f64,
}

/// One elimination round: proposals in play order, then the surviving
/// original tree indices.
#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub proposals: Vec<ProposalLog>,
    pub survivors: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TournamentResult {
    pub winner: usize,
    pub rounds: Vec<RoundLog>,
}

/// Elimination tournament over trees with different feature orderings.
///
/// Rounds alternate play direction over the alive trees (ascending original
/// index on odd rounds, descending on even), every proposal's reward is
/// shared with every alive tree, and after each full round the field is
/// halved to the `ceil(n/2)` trees with the highest cumulative reward from
/// their own proposals (ties keep the lower original index).
pub struct Tournament {
    trees: Vec<MctsTree>,
    alive: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Tournament {
    pub fn new(trees: Vec<MctsTree>) -> Tournament {
        assert!(!trees.is_empty(), "tournament needs at least one tree");
        let k = trees.len();
        Tournament {
            trees,
            alive: (0..k).collect(),
            cumulative: vec![0.0; k],
        }
    }

    pub fn trees(&self) -> &[MctsTree] {
        &self.trees
    }

    pub fn stats(&self, space: &ConfigSpace) -> Vec<TreeStats> {
        self.trees.iter().map(|t| t.stats(space)).collect()
    }

    /// Consume the tournament, returning the trees for the caller to pick
    /// the winner out of.
    pub fn into_trees(self) -> Vec<MctsTree> {
        self.trees
    }

    /// Run rounds until one tree is left. `evaluate` maps a proposed sparse
    /// assignment to a reward (higher is better); a single-tree field wins
    /// immediately with no proposals.
    pub fn run<R, E>(
        &mut self,
        space: &ConfigSpace,
        rng: &mut R,
        mut evaluate: E,
    ) -> TournamentResult
    where
        R: Rng,
        E: FnMut(&SparseAssignment) -> f64,
    {
        let mut rounds = Vec::new();
        let mut round = 0;
        while self.alive.len() > 1 {
            round += 1;
            let mut order = self.alive.clone();
            order.sort_unstable();
            if round % 2 == 0 {
                order.reverse();
            }
            let mut proposals = Vec::with_capacity(order.len());
            for &ti in &order {
                let s = self.trees[ti].propose(space, rng);
                let r = evaluate(&s);
                for &tj in &self.alive {
                    self.trees[tj].backpropagate(space, &s, r);
                }
                self.cumulative[ti] += r;
                proposals.push(ProposalLog {
                    tree: ti,
                    key: sparse_key(space, &s),
                    reward: r,
                });
            }
            let keep = self.alive.len().div_ceil(2);
            let mut ranked = self.alive.clone();
            ranked.sort_by(|&a, &b| {
                self.cumulative[b]
                    .partial_cmp(&self.cumulative[a])
                    .expect("rewards are finite")
                    .then(a.cmp(&b))
            });
            ranked.truncate(keep);
            ranked.sort_unstable();
            self.alive = ranked;
            rounds.push(RoundLog {
                round,
                proposals,
                survivors: self.alive.clone(),
            });
        }
        TournamentResult {
            winner: self.alive[0],
            rounds,
        }
    }
}

/// Compact `name=value` rendering of a sparse assignment for logs.
fn sparse_key(space: &ConfigSpace, s: &SparseAssignment) -> String {
    (0..space.sparse_count())
        .map(|slot| {
            let name = &space.sparse_feature(slot).name;
            match s.values[slot] {
                Some(v) => format!("{name}={v}"),
                None => format!("{name}=~"),
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}
