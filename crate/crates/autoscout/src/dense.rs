//! Coordinate-wise refinement of the dense features with step momentum.
//!
//! The search walks one active coordinate at a time over its ordered grid.
//! Consecutive improvements along a coordinate double the step size (capped),
//! the first failure resets the step and reverses direction, and a second
//! failure moves on to the next active coordinate. When the sparse structure
//! changes, the state is re-projected onto the new feasible subspace: values
//! carry over where their feature stays active, newly activated features
//! enter at their defaults with fresh momentum, and the cursor re-anchors if
//! its feature disappeared.

use crate::space::{ConfigSpace, DenseAssignment, Mask};

/// Largest number of grid positions a single proposal may jump.
pub const MAX_STEP: usize = 8;

#[derive(Debug, Clone)]
pub struct DenseSearch {
    mask: Mask,
    current: DenseAssignment,
    direction: Vec<i8>,
    step: Vec<usize>,
    step_cap: usize,
    cursor: usize,
    flip_used: bool,
}

impl DenseSearch {
    /// Start from the per-feature defaults projected into `mask`.
    pub fn new(space: &ConfigSpace, mask: Mask) -> DenseSearch {
        Self::with_step_cap(space, mask, MAX_STEP)
    }

    /// Like [`DenseSearch::new`] but with a custom momentum step cap.
    pub fn with_step_cap(space: &ConfigSpace, mask: Mask, step_cap: usize) -> DenseSearch {
        assert!(step_cap >= 1, "step cap must allow at least one grid step");
        let n = space.dense_count();
        let current = space.project(&space.default_dense(), &mask);
        let cursor = mask.active_slots().next().unwrap_or(0);
        DenseSearch {
            mask,
            current,
            direction: vec![1; n],
            step: vec![1; n],
            step_cap,
            cursor,
            flip_used: false,
        }
    }

    pub fn current(&self) -> &DenseAssignment {
        &self.current
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Slot the next proposal will move, `None` when the mask activates no
    /// dense feature.
    pub fn cursor_slot(&self) -> Option<usize> {
        if self
            .mask
            .active_slots()
            .any(|slot| slot == self.cursor)
        {
            Some(self.cursor)
        } else {
            self.mask.active_slots().next()
        }
    }

    fn walk(pos: usize, direction: i8, step: usize, last: usize) -> usize {
        if direction > 0 {
            (pos + step).min(last)
        } else {
            pos.saturating_sub(step)
        }
    }

    /// Candidate one momentum step away from the current point. At a grid
    /// boundary the direction is reversed in place before stepping; that
    /// reversal is a geometric necessity, not a failure, so it does not
    /// consume the failure-driven flip. A single-point grid proposes the
    /// current point itself.
    pub fn propose(&mut self) -> DenseAssignment {
        let Some(slot) = self.cursor_slot() else {
            return self.current.clone();
        };
        let grid = self.mask.subgrid(slot);
        let cur = self.current.values[slot].expect("active slot carries a value");
        let pos = grid
            .iter()
            .position(|&v| v == cur)
            .expect("projected value lies on its sub-grid");
        let last = grid.len() - 1;
        let mut target = Self::walk(pos, self.direction[slot], self.step[slot], last);
        if target == pos {
            self.direction[slot] = -self.direction[slot];
            target = Self::walk(pos, self.direction[slot], self.step[slot], last);
        }
        let mut candidate = self.current.clone();
        candidate.values[slot] = Some(grid[target]);
        candidate
    }

    /// Fold in the outcome of the last proposal. An improvement adopts
    /// `adopted` as the new current point and doubles the cursor's step; a
    /// failure resets the step, flipping direction the first time and
    /// advancing to the next active coordinate the second.
    pub fn update(&mut self, improved: bool, adopted: &DenseAssignment) {
        let Some(slot) = self.cursor_slot() else {
            return;
        };
        self.cursor = slot;
        if improved {
            self.current = adopted.clone();
            self.step[slot] = (self.step[slot] * 2).min(self.step_cap);
            self.flip_used = false;
        } else {
            self.step[slot] = 1;
            if self.flip_used {
                self.cursor = self.next_active_after(slot);
                self.flip_used = false;
            } else {
                self.direction[slot] = -self.direction[slot];
                self.flip_used = true;
            }
        }
    }

    fn next_active_after(&self, slot: usize) -> usize {
        let n = self.direction.len();
        (1..=n)
            .map(|d| (slot + d) % n)
            .find(|&s| self.mask.is_active(s))
            .unwrap_or(slot)
    }

    /// Carry the state onto a new mask after the sparse structure moved.
    /// An identical mask leaves everything untouched, including momentum.
    pub fn reproject(&mut self, space: &ConfigSpace, mask: Mask) {
        if mask == self.mask {
            return;
        }
        let n = self.direction.len();
        for slot in 0..n {
            if mask.is_active(slot) && !self.mask.is_active(slot) {
                self.direction[slot] = 1;
                self.step[slot] = 1;
            }
        }
        self.current = space.project(&self.current, &mask);
        let cursor_survived = mask.is_active(self.cursor);
        self.mask = mask;
        if !cursor_survived {
            self.cursor = self.mask.active_slots().next().unwrap_or(0);
            self.flip_used = false;
        }
    }
}
