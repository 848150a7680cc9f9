//! Structured configuration spaces: feature declarations with conditional
//! activation, global feasibility constraints, masking of dense knobs by
//! sparse choices, projection onto the feasible subspace, and exhaustive
//! enumeration.
//!
//! A space declares an ordered list of features. Each feature is either
//! `sparse` (categorical, searched by tree methods) or `dense` (an ordered
//! numeric grid, searched by coordinate refinement). A feature may carry an
//! activation predicate (`requires`), a conjunction of atomic comparisons
//! against sparse features declared earlier; when the predicate is false the
//! feature is inactive and carries no value. Global constraints couple
//! sparse values across features (device-count products, divisibility).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single knob value. Domains mix integers and booleans; booleans read as
/// 0/1 wherever a numeric view is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
}

impl Value {
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Bool(b) => {
                if b {
                    1.0
                } else {
                    0.0
                }
            }
            Value::Int(i) => i as f64,
        }
    }

    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(i),
            Value::Bool(_) => None,
        }
    }

    fn same_kind(self, other: Value) -> bool {
        matches!(
            (self, other),
            (Value::Bool(_), Value::Bool(_)) | (Value::Int(_), Value::Int(_))
        )
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

/// One atomic `feature <op> value` clause of an activation predicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub op: CmpOp,
    pub value: Value,
}

impl Condition {
    /// Evaluate against the referenced feature's value. A comparison against
    /// an inactive feature is false: a gated-off knob has no value.
    fn holds(&self, v: Option<Value>) -> bool {
        let Some(v) = v else { return false };
        match self.op {
            CmpOp::Gt => v.as_f64() > self.value.as_f64(),
            CmpOp::Ge => v.as_f64() >= self.value.as_f64(),
            CmpOp::Eq => v == self.value,
            CmpOp::Ne => v != self.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Sparse,
    Dense,
}

/// Declaration of a single feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Ordered, finite domain. Strictly increasing for dense grids.
    pub domain: Vec<Value>,
    /// Value used when the feature is first activated and by baseline
    /// configurations. Must be a member of `domain`.
    pub default: Value,
    /// Activation predicate: conjunction of conditions on sparse features
    /// declared earlier. Empty means always active.
    #[serde(default)]
    pub requires: Vec<Condition>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceClass {
    pub class: String,
    pub count: u32,
    pub mem_gb: f64,
    pub rel_throughput: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub devices: Vec<DeviceClass>,
}

impl HardwareSpec {
    pub fn total_devices(&self) -> u64 {
        self.devices.iter().map(|d| u64::from(d.count)).sum()
    }

    /// Indices of `devices` ordered fastest first, ties keeping declaration
    /// order.
    fn speed_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.devices.len()).collect();
        order.sort_by(|&a, &b| {
            self.devices[b]
                .rel_throughput
                .partial_cmp(&self.devices[a].rel_throughput)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }

    /// Assign `world` devices greedily, filling the fastest class first.
    /// Returns per-class assigned counts in declaration order. A `world`
    /// larger than the cluster saturates every class.
    pub fn assign(&self, world: u64) -> Vec<u64> {
        let mut assigned = vec![0u64; self.devices.len()];
        let mut remaining = world;
        for idx in self.speed_order() {
            let take = remaining.min(u64::from(self.devices[idx].count));
            assigned[idx] = take;
            remaining -= take;
            if remaining == 0 {
                break;
            }
        }
        assigned
    }

    /// Lowest relative throughput among the devices `assign(world)` picks.
    /// The slowest participant paces synchronous training.
    pub fn efficiency(&self, world: u64) -> f64 {
        let assigned = self.assign(world.max(1));
        self.devices
            .iter()
            .zip(&assigned)
            .filter(|(_, &n)| n > 0)
            .map(|(d, _)| d.rel_throughput)
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest per-device memory among the classes `assign(world)` uses.
    pub fn min_assigned_mem_gb(&self, world: u64) -> f64 {
        let assigned = self.assign(world.max(1));
        self.devices
            .iter()
            .zip(&assigned)
            .filter(|(_, &n)| n > 0)
            .map(|(d, _)| d.mem_gb)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum GlobalConstraint {
    /// Product of the listed sparse feature values must not exceed the
    /// total device count.
    #[serde(rename = "product_le_devices")]
    ProductLeDevices { features: Vec<String> },
    /// Value of feature `a` must divide the value of feature `b`.
    #[serde(rename = "divides")]
    Divides { a: String, b: String },
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid space document: {0}")]
    Schema(String),
    #[error("failed to read space file: {0}")]
    Io(#[from] std::io::Error),
    #[error("space declares no features")]
    Empty,
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
    #[error("feature `{0}` has an empty domain")]
    EmptyDomain(String),
    #[error("feature `{0}`: domain values must all be integers or all booleans")]
    MixedDomain(String),
    #[error("feature `{0}`: default {1} is not in its domain")]
    DefaultOutsideDomain(String, Value),
    #[error("feature `{0}`: dense grid must be strictly increasing")]
    UnorderedGrid(String),
    #[error("feature `{0}`: predicate references unknown feature `{1}`")]
    UnknownFeature(String, String),
    #[error("cyclic activation dependency involving `{0}`")]
    CyclicDependency(String),
    #[error("feature `{0}`: predicate references `{1}`, which is declared later")]
    ForwardReference(String, String),
    #[error("feature `{0}`: predicate may only reference sparse features, `{1}` is dense")]
    DenseGate(String, String),
    #[error("feature `{0}`: predicate value kind does not match domain of `{1}`")]
    KindMismatch(String, String),
    #[error("constraint references unknown feature `{0}`")]
    ConstraintUnknownFeature(String),
    #[error("constraint feature `{0}` must be a sparse feature with positive integer domain")]
    ConstraintKind(String),
    #[error("hardware declares no devices")]
    NoDevices,
    #[error("space admits no feasible configuration")]
    Infeasible,
}

/// Values of all sparse features, one slot per sparse feature in
/// declaration order. `None` means the feature is inactive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseAssignment {
    pub(crate) values: Vec<Option<Value>>,
}

impl SparseAssignment {
    pub fn get(&self, slot: usize) -> Option<Value> {
        self.values[slot]
    }

    pub fn slots(&self) -> &[Option<Value>] {
        &self.values
    }
}

/// Values of all dense features, one slot per dense feature in declaration
/// order. `None` means the feature is masked off by the current structure.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DenseAssignment {
    pub(crate) values: Vec<Option<Value>>,
}

impl DenseAssignment {
    pub fn get(&self, slot: usize) -> Option<Value> {
        self.values[slot]
    }

    pub fn slots(&self) -> &[Option<Value>] {
        &self.values
    }
}

/// A complete configuration: one sparse and one dense assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    pub sparse: SparseAssignment,
    pub dense: DenseAssignment,
}

/// Which dense features the current structure activates, and the grid each
/// active feature may range over (the declared grid, possibly narrowed).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub(crate) active: Vec<bool>,
    pub(crate) subgrids: Vec<Vec<Value>>,
}

impl Mask {
    pub fn is_active(&self, slot: usize) -> bool {
        self.active[slot]
    }

    pub fn subgrid(&self, slot: usize) -> &[Value] {
        &self.subgrids[slot]
    }

    pub fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    /// Replace one feature's feasible sub-grid. Used where a structure
    /// narrows the usable range of a dense knob below its declared grid.
    pub fn narrow(&mut self, slot: usize, grid: Vec<Value>) {
        assert!(!grid.is_empty(), "narrowed sub-grid must be non-empty");
        self.subgrids[slot] = grid;
    }
}

#[derive(Deserialize)]
struct SpaceDoc {
    hardware: HardwareSpec,
    features: Vec<FeatureSpec>,
    #[serde(default)]
    constraints: Vec<GlobalConstraint>,
}

/// A validated configuration space.
#[derive(Debug, Clone)]
pub struct ConfigSpace {
    features: Vec<FeatureSpec>,
    hardware: HardwareSpec,
    constraints: Vec<GlobalConstraint>,
    index: HashMap<String, usize>,
    sparse_idx: Vec<usize>,
    dense_idx: Vec<usize>,
    /// Per feature: position within its kind's slot list.
    slot_of: Vec<usize>,
}

impl ConfigSpace {
    pub fn load_str(doc: &str) -> Result<ConfigSpace, SpaceError> {
        let doc: SpaceDoc =
            serde_json::from_str(doc).map_err(|e| SpaceError::Schema(e.to_string()))?;
        Self::from_parts(doc.hardware, doc.features, doc.constraints)
    }

    pub fn load_file(path: &Path) -> Result<ConfigSpace, SpaceError> {
        Self::load_str(&fs::read_to_string(path)?)
    }

    pub fn from_parts(
        hardware: HardwareSpec,
        features: Vec<FeatureSpec>,
        constraints: Vec<GlobalConstraint>,
    ) -> Result<ConfigSpace, SpaceError> {
        if features.is_empty() {
            return Err(SpaceError::Empty);
        }
        if hardware.devices.is_empty() {
            return Err(SpaceError::NoDevices);
        }

        let mut index = HashMap::new();
        for (i, f) in features.iter().enumerate() {
            if index.insert(f.name.clone(), i).is_some() {
                return Err(SpaceError::DuplicateName(f.name.clone()));
            }
        }

        for f in &features {
            if f.domain.is_empty() {
                return Err(SpaceError::EmptyDomain(f.name.clone()));
            }
            if f.domain.iter().any(|v| !v.same_kind(f.domain[0])) {
                return Err(SpaceError::MixedDomain(f.name.clone()));
            }
            if !f.domain.contains(&f.default) {
                return Err(SpaceError::DefaultOutsideDomain(f.name.clone(), f.default));
            }
            if f.kind == FeatureKind::Dense
                && f.domain.windows(2).any(|w| w[0].as_f64() >= w[1].as_f64())
            {
                return Err(SpaceError::UnorderedGrid(f.name.clone()));
            }
        }

        // Predicate references: existence first, then cycles over the full
        // reference graph, then declaration-order and kind checks. Mutual
        // references must surface as a cycle, not as a forward reference.
        for f in &features {
            for c in &f.requires {
                if !index.contains_key(&c.feature) {
                    return Err(SpaceError::UnknownFeature(f.name.clone(), c.feature.clone()));
                }
            }
        }
        detect_cycles(&features, &index)?;
        for (i, f) in features.iter().enumerate() {
            for c in &f.requires {
                let j = index[&c.feature];
                if j >= i {
                    return Err(SpaceError::ForwardReference(
                        f.name.clone(),
                        c.feature.clone(),
                    ));
                }
                let referenced = &features[j];
                if referenced.kind != FeatureKind::Sparse {
                    return Err(SpaceError::DenseGate(f.name.clone(), c.feature.clone()));
                }
                if !c.value.same_kind(referenced.domain[0]) {
                    return Err(SpaceError::KindMismatch(f.name.clone(), c.feature.clone()));
                }
            }
        }

        for c in &constraints {
            let named: Vec<&String> = match c {
                GlobalConstraint::ProductLeDevices { features } => features.iter().collect(),
                GlobalConstraint::Divides { a, b } => vec![a, b],
            };
            for name in named {
                let Some(&i) = index.get(name) else {
                    return Err(SpaceError::ConstraintUnknownFeature(name.clone()));
                };
                let f = &features[i];
                let positive_ints = f
                    .domain
                    .iter()
                    .all(|v| matches!(v, Value::Int(i) if *i >= 1));
                if f.kind != FeatureKind::Sparse || !positive_ints {
                    return Err(SpaceError::ConstraintKind(name.clone()));
                }
            }
        }

        let sparse_idx: Vec<usize> = features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| (f.kind == FeatureKind::Sparse).then_some(i))
            .collect();
        let dense_idx: Vec<usize> = features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| (f.kind == FeatureKind::Dense).then_some(i))
            .collect();
        let mut slot_of = vec![0usize; features.len()];
        for (slot, &i) in sparse_idx.iter().enumerate() {
            slot_of[i] = slot;
        }
        for (slot, &i) in dense_idx.iter().enumerate() {
            slot_of[i] = slot;
        }

        let space = ConfigSpace {
            features,
            hardware,
            constraints,
            index,
            sparse_idx,
            dense_idx,
            slot_of,
        };
        if space.enumerate().next().is_none() {
            return Err(SpaceError::Infeasible);
        }
        Ok(space)
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn hardware(&self) -> &HardwareSpec {
        &self.hardware
    }

    pub fn constraints(&self) -> &[GlobalConstraint] {
        &self.constraints
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn sparse_count(&self) -> usize {
        self.sparse_idx.len()
    }

    pub fn dense_count(&self) -> usize {
        self.dense_idx.len()
    }

    pub fn sparse_feature(&self, slot: usize) -> &FeatureSpec {
        &self.features[self.sparse_idx[slot]]
    }

    pub fn dense_feature(&self, slot: usize) -> &FeatureSpec {
        &self.features[self.dense_idx[slot]]
    }

    /// Sparse slot index for a feature name, if it names a sparse feature.
    pub fn sparse_slot(&self, name: &str) -> Option<usize> {
        let &i = self.index.get(name)?;
        (self.features[i].kind == FeatureKind::Sparse).then(|| self.slot_of[i])
    }

    pub fn dense_slot(&self, name: &str) -> Option<usize> {
        let &i = self.index.get(name)?;
        (self.features[i].kind == FeatureKind::Dense).then(|| self.slot_of[i])
    }

    /// Value of a named feature within a configuration; `None` when
    /// inactive or not declared by this space.
    pub fn value_of(&self, c: &Configuration, name: &str) -> Option<Value> {
        let &i = self.index.get(name)?;
        let slot = self.slot_of[i];
        match self.features[i].kind {
            FeatureKind::Sparse => c.sparse.values[slot],
            FeatureKind::Dense => c.dense.values[slot],
        }
    }

    fn sparse_value_by_name(&self, s: &SparseAssignment, name: &str) -> Option<Value> {
        let slot = self.sparse_slot(name)?;
        s.values[slot]
    }

    /// Evaluate a feature's activation predicate under a sparse assignment.
    /// Predicates only reference sparse features (validated at load).
    pub fn activation(&self, feature: &FeatureSpec, s: &SparseAssignment) -> bool {
        feature
            .requires
            .iter()
            .all(|c| c.holds(self.sparse_value_by_name(s, &c.feature)))
    }

    /// Which dense features `s` activates, each with its full declared grid.
    pub fn mask(&self, s: &SparseAssignment) -> Mask {
        let mut active = Vec::with_capacity(self.dense_idx.len());
        let mut subgrids = Vec::with_capacity(self.dense_idx.len());
        for &i in &self.dense_idx {
            let f = &self.features[i];
            active.push(self.activation(f, s));
            subgrids.push(f.domain.clone());
        }
        Mask { active, subgrids }
    }

    /// Force a dense assignment into the subspace a mask describes: masked
    /// features become inactive, active features are clamped to the nearest
    /// sub-grid value (ties toward the smaller value). An active feature
    /// with no incoming value enters at its default. Idempotent.
    pub fn project(&self, x: &DenseAssignment, m: &Mask) -> DenseAssignment {
        let values = self
            .dense_idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                if !m.active[slot] {
                    return None;
                }
                let raw = x.values[slot].unwrap_or(self.features[i].default);
                Some(clamp_to_grid(raw, &m.subgrids[slot]))
            })
            .collect();
        DenseAssignment { values }
    }

    /// Dense assignment with every feature at its declared default,
    /// ignoring activation. Project through a mask before use.
    pub fn default_dense(&self) -> DenseAssignment {
        DenseAssignment {
            values: self
                .dense_idx
                .iter()
                .map(|&i| Some(self.features[i].default))
                .collect(),
        }
    }

    /// Sparse assignment with every active feature at its default, gated
    /// features resolved in declaration order.
    pub fn default_sparse(&self) -> SparseAssignment {
        let mut s = SparseAssignment {
            values: vec![None; self.sparse_idx.len()],
        };
        for (slot, &i) in self.sparse_idx.iter().enumerate() {
            let f = &self.features[i];
            s.values[slot] = self.activation(f, &s).then_some(f.default);
        }
        s
    }

    /// Full feasibility check: every feature inactive exactly when its
    /// predicate fails, values on their domains, global constraints hold.
    pub fn is_feasible(&self, c: &Configuration) -> bool {
        if c.sparse.values.len() != self.sparse_idx.len()
            || c.dense.values.len() != self.dense_idx.len()
        {
            return false;
        }
        for (slot, &i) in self.sparse_idx.iter().enumerate() {
            let f = &self.features[i];
            if !consistent(self.activation(f, &c.sparse), c.sparse.values[slot], f) {
                return false;
            }
        }
        for (slot, &i) in self.dense_idx.iter().enumerate() {
            let f = &self.features[i];
            if !consistent(self.activation(f, &c.sparse), c.dense.values[slot], f) {
                return false;
            }
        }
        self.constraints_hold(&c.sparse)
    }

    /// Value a constraint sees for a sparse feature: the assigned value, or
    /// the declared default when the feature is inactive.
    fn constraint_value(&self, s: &SparseAssignment, name: &str) -> i64 {
        let slot = self.sparse_slot(name).expect("validated constraint feature");
        let i = self.sparse_idx[slot];
        s.values[slot]
            .unwrap_or(self.features[i].default)
            .as_int()
            .expect("validated integer domain")
    }

    pub fn constraints_hold(&self, s: &SparseAssignment) -> bool {
        self.constraints.iter().all(|c| match c {
            GlobalConstraint::ProductLeDevices { features } => {
                let mut product: i64 = 1;
                for name in features {
                    product = product.saturating_mul(self.constraint_value(s, name));
                }
                product <= self.hardware.total_devices() as i64
            }
            GlobalConstraint::Divides { a, b } => {
                let va = self.constraint_value(s, a);
                let vb = self.constraint_value(s, b);
                va != 0 && vb % va == 0
            }
        })
    }

    /// Can a partial sparse assignment (slots with `decided[slot]` fixed)
    /// still be extended to one satisfying every global constraint? Exact
    /// for product bounds (domains are positive, so minima are lower
    /// bounds); existential over undecided domains for divisibility.
    pub(crate) fn partial_feasible(&self, s: &SparseAssignment, decided: &[bool]) -> bool {
        let value_or = |name: &str| -> PartialVal {
            let slot = self.sparse_slot(name).expect("validated constraint feature");
            let f = &self.features[self.sparse_idx[slot]];
            if decided[slot] {
                let v = s.values[slot].unwrap_or(f.default);
                PartialVal::Known(v.as_int().expect("validated integer domain"))
            } else {
                PartialVal::Undecided(f.domain.clone())
            }
        };
        self.constraints.iter().all(|c| match c {
            GlobalConstraint::ProductLeDevices { features } => {
                let mut product: i64 = 1;
                for name in features {
                    let factor = match value_or(name) {
                        PartialVal::Known(v) => v,
                        PartialVal::Undecided(dom) => dom
                            .iter()
                            .filter_map(|v| v.as_int())
                            .min()
                            .expect("non-empty integer domain"),
                    };
                    product = product.saturating_mul(factor);
                }
                product <= self.hardware.total_devices() as i64
            }
            GlobalConstraint::Divides { a, b } => {
                match (value_or(a), value_or(b)) {
                    (PartialVal::Known(va), PartialVal::Known(vb)) => va != 0 && vb % va == 0,
                    (PartialVal::Known(va), PartialVal::Undecided(dom)) => dom
                        .iter()
                        .filter_map(|v| v.as_int())
                        .any(|vb| va != 0 && vb % va == 0),
                    (PartialVal::Undecided(dom), PartialVal::Known(vb)) => dom
                        .iter()
                        .filter_map(|v| v.as_int())
                        .any(|va| va != 0 && vb % va == 0),
                    (PartialVal::Undecided(da), PartialVal::Undecided(db)) => {
                        da.iter().filter_map(|v| v.as_int()).any(|va| {
                            db.iter()
                                .filter_map(|v| v.as_int())
                                .any(|vb| va != 0 && vb % va == 0)
                        })
                    }
                }
            }
        })
    }

    /// Candidate values for sparse slot `slot` given the `decided` slots
    /// already fixed in `s`: `[None]` when gated off, otherwise every
    /// domain value that keeps the partial assignment extensible. Callers
    /// must have decided every slot the feature's predicate references.
    pub(crate) fn sparse_candidates(
        &self,
        s: &SparseAssignment,
        slot: usize,
        decided: &[bool],
    ) -> Vec<Option<Value>> {
        let f = self.sparse_feature(slot);
        if !self.activation(f, s) {
            return vec![None];
        }
        let mut probe = s.clone();
        let mut probe_decided = decided.to_vec();
        probe_decided[slot] = true;
        f.domain
            .iter()
            .filter(|&&v| {
                probe.values[slot] = Some(v);
                self.partial_feasible(&probe, &probe_decided)
            })
            .map(|&v| Some(v))
            .collect()
    }

    /// Stream every feasible configuration exactly once, in a fixed
    /// deterministic order (declaration order of features, domain order of
    /// values, inactive branches collapsing to a single child).
    pub fn enumerate(&self) -> Enumerator<'_> {
        Enumerator::new(self)
    }

    /// Uniform-random feasible sparse assignment via backtracking descent
    /// with shuffled branch order. Feasible by construction; the branch
    /// distribution is not uniform over the feasible set.
    pub fn sample_sparse<R: Rng>(&self, rng: &mut R) -> Option<SparseAssignment> {
        let mut s = SparseAssignment {
            values: vec![None; self.sparse_idx.len()],
        };
        let mut decided = vec![false; self.sparse_idx.len()];
        if self.fill_sparse(&mut s, &mut decided, 0, rng) {
            Some(s)
        } else {
            None
        }
    }

    fn fill_sparse<R: Rng>(
        &self,
        s: &mut SparseAssignment,
        decided: &mut [bool],
        slot: usize,
        rng: &mut R,
    ) -> bool {
        if slot == self.sparse_idx.len() {
            return self.constraints_hold(s);
        }
        let mut candidates = self.sparse_candidates(s, slot, decided);
        candidates.shuffle(rng);
        decided[slot] = true;
        for v in candidates {
            s.values[slot] = v;
            if self.fill_sparse(s, decided, slot + 1, rng) {
                return true;
            }
        }
        s.values[slot] = None;
        decided[slot] = false;
        false
    }

    /// Number of devices a sparse assignment occupies: the product of the
    /// features named by the first device-product constraint (1 when the
    /// space declares none). This is what the hardware assignment rule and
    /// the allocation-derived simulator inputs key on.
    pub fn world_size(&self, s: &SparseAssignment) -> u64 {
        for c in &self.constraints {
            if let GlobalConstraint::ProductLeDevices { features } = c {
                let mut product: i64 = 1;
                for name in features {
                    product = product.saturating_mul(self.constraint_value(s, name));
                }
                return product.max(1) as u64;
            }
        }
        1
    }

    /// Random dense assignment with every feature drawn from its declared
    /// grid, ignoring activation. Useful as raw input to `project`.
    pub fn sample_dense_raw<R: Rng>(&self, rng: &mut R) -> DenseAssignment {
        DenseAssignment {
            values: self
                .dense_idx
                .iter()
                .map(|&i| {
                    let dom = &self.features[i].domain;
                    Some(dom[rng.gen_range(0..dom.len())])
                })
                .collect(),
        }
    }

    /// Canonical serialization of a configuration: `name=value` pairs in
    /// declaration order, inactive features rendered as `~`. Injective over
    /// the space's configurations.
    pub fn canonical_key(&self, c: &Configuration) -> String {
        let mut parts = Vec::with_capacity(self.features.len());
        for (i, f) in self.features.iter().enumerate() {
            let slot = self.slot_of[i];
            let v = match f.kind {
                FeatureKind::Sparse => c.sparse.values[slot],
                FeatureKind::Dense => c.dense.values[slot],
            };
            match v {
                Some(v) => parts.push(format!("{}={}", f.name, v)),
                None => parts.push(format!("{}=~", f.name)),
            }
        }
        parts.join(";")
    }

    /// Flat JSON object view of a configuration: feature name to value,
    /// `null` for inactive features.
    pub fn to_flat_json(&self, c: &Configuration) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (i, f) in self.features.iter().enumerate() {
            let slot = self.slot_of[i];
            let v = match f.kind {
                FeatureKind::Sparse => c.sparse.values[slot],
                FeatureKind::Dense => c.dense.values[slot],
            };
            let jv = match v {
                Some(Value::Int(n)) => serde_json::Value::from(n),
                Some(Value::Bool(b)) => serde_json::Value::from(b),
                None => serde_json::Value::Null,
            };
            map.insert(f.name.clone(), jv);
        }
        serde_json::Value::Object(map)
    }

    /// Parse a flat JSON object back into a configuration. Features absent
    /// from the object are treated as inactive.
    pub fn from_flat_json(&self, v: &serde_json::Value) -> Result<Configuration, SpaceError> {
        let obj = v
            .as_object()
            .ok_or_else(|| SpaceError::Schema("configuration must be a JSON object".into()))?;
        let mut sparse = SparseAssignment {
            values: vec![None; self.sparse_idx.len()],
        };
        let mut dense = DenseAssignment {
            values: vec![None; self.dense_idx.len()],
        };
        for (name, jv) in obj {
            let Some(&i) = self.index.get(name) else {
                return Err(SpaceError::Schema(format!("unknown feature `{name}`")));
            };
            let parsed = match jv {
                serde_json::Value::Null => None,
                serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
                serde_json::Value::Number(n) => Some(Value::Int(n.as_i64().ok_or_else(|| {
                    SpaceError::Schema(format!("feature `{name}`: non-integer value"))
                })?)),
                _ => {
                    return Err(SpaceError::Schema(format!(
                        "feature `{name}`: unsupported value type"
                    )))
                }
            };
            match self.features[i].kind {
                FeatureKind::Sparse => sparse.values[self.slot_of[i]] = parsed,
                FeatureKind::Dense => dense.values[self.slot_of[i]] = parsed,
            }
        }
        Ok(Configuration { sparse, dense })
    }
}

enum PartialVal {
    Known(i64),
    Undecided(Vec<Value>),
}

fn consistent(active: bool, value: Option<Value>, f: &FeatureSpec) -> bool {
    match (active, value) {
        (true, Some(v)) => f.domain.contains(&v),
        (false, None) => true,
        _ => false,
    }
}

/// Nearest grid value by numeric distance, ties resolved toward the
/// smaller value. `grid` is strictly increasing, so scanning in order and
/// keeping the first minimum implements the tie rule.
pub fn clamp_to_grid(v: Value, grid: &[Value]) -> Value {
    debug_assert!(!grid.is_empty());
    let target = v.as_f64();
    let mut best = grid[0];
    let mut best_dist = (best.as_f64() - target).abs();
    for &g in &grid[1..] {
        let d = (g.as_f64() - target).abs();
        if d < best_dist {
            best = g;
            best_dist = d;
        }
    }
    best
}

fn detect_cycles(
    features: &[FeatureSpec],
    index: &HashMap<String, usize>,
) -> Result<(), SpaceError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    fn visit(
        i: usize,
        features: &[FeatureSpec],
        index: &HashMap<String, usize>,
        colors: &mut [Color],
    ) -> Result<(), SpaceError> {
        colors[i] = Color::Gray;
        for c in &features[i].requires {
            let j = index[&c.feature];
            match colors[j] {
                Color::Gray => return Err(SpaceError::CyclicDependency(features[i].name.clone())),
                Color::White => visit(j, features, index, colors)?,
                Color::Black => {}
            }
        }
        colors[i] = Color::Black;
        Ok(())
    }
    let mut colors = vec![Color::White; features.len()];
    for i in 0..features.len() {
        if colors[i] == Color::White {
            visit(i, features, index, &mut colors)?;
        }
    }
    Ok(())
}

/// Depth-first streaming enumeration of every feasible configuration.
pub struct Enumerator<'a> {
    space: &'a ConfigSpace,
    /// One frame per declared feature, in declaration order.
    candidates: Vec<Vec<Option<Value>>>,
    cursor: Vec<usize>,
    sparse: SparseAssignment,
    dense: DenseAssignment,
    decided: Vec<bool>,
    depth: usize,
    exhausted: bool,
}

impl<'a> Enumerator<'a> {
    fn new(space: &'a ConfigSpace) -> Self {
        let n = space.features.len();
        Enumerator {
            space,
            candidates: vec![Vec::new(); n],
            cursor: vec![0; n],
            sparse: SparseAssignment {
                values: vec![None; space.sparse_idx.len()],
            },
            dense: DenseAssignment {
                values: vec![None; space.dense_idx.len()],
            },
            decided: vec![false; space.sparse_idx.len()],
            depth: 0,
            exhausted: false,
        }
    }

    fn candidates_at(&self, depth: usize) -> Vec<Option<Value>> {
        let f = &self.space.features[depth];
        let slot = self.space.slot_of[depth];
        match f.kind {
            FeatureKind::Sparse => self.space.sparse_candidates(&self.sparse, slot, &self.decided),
            FeatureKind::Dense => {
                if self.space.activation(f, &self.sparse) {
                    f.domain.iter().map(|&v| Some(v)).collect()
                } else {
                    vec![None]
                }
            }
        }
    }

    fn store(&mut self, depth: usize, v: Option<Value>, decided: bool) {
        let slot = self.space.slot_of[depth];
        match self.space.features[depth].kind {
            FeatureKind::Sparse => {
                self.sparse.values[slot] = v;
                self.decided[slot] = decided;
            }
            FeatureKind::Dense => self.dense.values[slot] = v,
        }
    }
}

impl Iterator for Enumerator<'_> {
    type Item = Configuration;

    fn next(&mut self) -> Option<Configuration> {
        if self.exhausted {
            return None;
        }
        let n = self.space.features.len();
        loop {
            if self.depth == n {
                // At a leaf: emit, then step the deepest cursor.
                let config = Configuration {
                    sparse: self.sparse.clone(),
                    dense: self.dense.clone(),
                };
                self.depth = n - 1;
                self.cursor[self.depth] += 1;
                debug_assert!(self.space.is_feasible(&config));
                return Some(config);
            }
            if self.cursor[self.depth] == 0 {
                self.candidates[self.depth] = self.candidates_at(self.depth);
            }
            match self.candidates[self.depth].get(self.cursor[self.depth]) {
                Some(&v) => {
                    self.store(self.depth, v, true);
                    self.depth += 1;
                    if self.depth < n {
                        self.cursor[self.depth] = 0;
                    }
                }
                None => {
                    // Frame exhausted: backtrack.
                    self.store(self.depth, None, false);
                    if self.depth == 0 {
                        self.exhausted = true;
                        return None;
                    }
                    self.depth -= 1;
                    self.cursor[self.depth] += 1;
                }
            }
        }
    }
}
