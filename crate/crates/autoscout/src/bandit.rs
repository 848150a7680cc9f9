//! Two-armed UCB1 with a decaying exploration coefficient, used to split
//! iteration budget between the sparse (tree search) and dense (coordinate
//! refinement) optimizers.
//!
//! The selection rule is
//!
//! ```text
//! a_t = argmax_a  Q_a / N_a + C(t) * sqrt(ln N_total / N_a)
//! C(t) = C0 * gamma^t
//! ```
//!
//! with unpulled arms selected first (Sparse before Dense) and exact ties
//! resolved toward Sparse. Pull counts are stored as floats because a
//! fidelity switch discounts accumulated statistics by a multiplier,
//! turning them into fractional pseudo-counts while preserving means.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Sparse,
    Dense,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Sparse, Arm::Dense];

    pub fn index(self) -> usize {
        match self {
            Arm::Sparse => 0,
            Arm::Dense => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Sparse => "sparse",
            Arm::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BanditState {
    q: [f64; 2],
    n: [f64; 2],
    c0: f64,
    gamma: f64,
}

impl BanditState {
    /// `c0` is the initial exploration coefficient, `gamma` its per-step
    /// decay. `gamma = 1` disables the decay.
    pub fn new(c0: f64, gamma: f64) -> Self {
        assert!(c0 >= 0.0, "exploration coefficient must be non-negative");
        assert!(
            gamma > 0.0 && gamma <= 1.0,
            "decay must lie in (0, 1], got {gamma}"
        );
        BanditState {
            q: [0.0; 2],
            n: [0.0; 2],
            c0,
            gamma,
        }
    }

    pub fn exploration_coefficient(&self, t: u64) -> f64 {
        self.c0 * self.gamma.powi(t.min(i32::MAX as u64) as i32)
    }

    pub fn q(&self, arm: Arm) -> f64 {
        self.q[arm.index()]
    }

    pub fn n(&self, arm: Arm) -> f64 {
        self.n[arm.index()]
    }

    pub fn total_pulls(&self) -> f64 {
        self.n[0] + self.n[1]
    }

    pub fn mean(&self, arm: Arm) -> Option<f64> {
        let i = arm.index();
        (self.n[i] > 0.0).then(|| self.q[i] / self.n[i])
    }

    /// UCB value of one arm at step `t`; `None` while the arm is unpulled
    /// (an unpulled arm outranks any finite value).
    pub fn ucb(&self, arm: Arm, t: u64) -> Option<f64> {
        let i = arm.index();
        if self.n[i] <= 0.0 {
            return None;
        }
        let bonus =
            self.exploration_coefficient(t) * (self.total_pulls().ln() / self.n[i]).sqrt();
        Some(self.q[i] / self.n[i] + bonus)
    }

    pub fn select_arm(&self, t: u64) -> Arm {
        match (self.ucb(Arm::Sparse, t), self.ucb(Arm::Dense, t)) {
            (None, _) => Arm::Sparse,
            (_, None) => Arm::Dense,
            (Some(s), Some(d)) => {
                if s >= d {
                    Arm::Sparse
                } else {
                    Arm::Dense
                }
            }
        }
    }

    /// Credit one pull of `arm` with `reward` (callers clip to [0, 1]).
    pub fn record(&mut self, arm: Arm, reward: f64) {
        let i = arm.index();
        self.q[i] += reward;
        self.n[i] += 1.0;
    }

    /// Discount accumulated statistics by `lambda`, demoting them to weak
    /// priors: every `Q_a` and `N_a` scales by `lambda`, so every mean
    /// `Q_a / N_a` is preserved exactly.
    pub fn scale(&mut self, lambda: f64) {
        assert!(lambda > 0.0 && lambda <= 1.0, "scale factor must be in (0, 1]");
        for i in 0..2 {
            self.q[i] *= lambda;
            self.n[i] *= lambda;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unpulled_arms_go_first_sparse_then_dense() {
        let mut b = BanditState::new(1.414, 0.995);
        assert_eq!(b.select_arm(0), Arm::Sparse);
        b.record(Arm::Sparse, 0.5);
        assert_eq!(b.select_arm(1), Arm::Dense);
        b.record(Arm::Dense, 0.5);
        // Equal means and counts: exact tie resolves toward Sparse.
        assert_eq!(b.select_arm(2), Arm::Sparse);
    }

    #[test]
    fn worked_example_prefers_the_higher_mean() {
        let mut b = BanditState::new(1.0, 1.0);
        b.record(Arm::Sparse, 1.5);
        b.record(Arm::Sparse, 1.5);
        b.record(Arm::Dense, 0.5);
        b.record(Arm::Dense, 0.5);
        // Q_S/N_S = 1.5, Q_D/N_D = 0.5, identical bonus sqrt(ln 4 / 2).
        let bonus = (4.0f64.ln() / 2.0).sqrt();
        assert!((b.ucb(Arm::Sparse, 0).unwrap() - (1.5 + bonus)).abs() < 1e-12);
        assert!((b.ucb(Arm::Dense, 0).unwrap() - (0.5 + bonus)).abs() < 1e-12);
        assert_eq!(b.select_arm(0), Arm::Sparse);
    }

    #[test]
    fn exploration_coefficient_decays_geometrically() {
        let b = BanditState::new(1.0, 0.9);
        assert!((b.exploration_coefficient(10) - 0.3486784401).abs() < 1e-9);
        let undecayed = BanditState::new(2.0, 1.0);
        assert_eq!(undecayed.exploration_coefficient(1000), 2.0);
    }

    #[test]
    fn scaling_preserves_means_exactly() {
        let mut b = BanditState::new(1.414, 0.995);
        for _ in 0..4 {
            b.record(Arm::Sparse, 2.0);
        }
        b.record(Arm::Dense, 0.25);
        let mean_before = b.mean(Arm::Sparse).unwrap();
        b.scale(0.25);
        assert_eq!(b.q(Arm::Sparse), 2.0);
        assert_eq!(b.n(Arm::Sparse), 1.0);
        assert_eq!(b.mean(Arm::Sparse).unwrap(), mean_before);
    }

    #[test]
    fn selection_matches_an_independent_formula_evaluation() {
        let mut rng = StdRng::seed_from_u64(20_240_501);
        for _ in 0..10_000 {
            let c0 = rng.gen_range(0.0..3.0);
            let gamma = rng.gen_range(0.5..=1.0);
            let t = rng.gen_range(0u64..500);
            let mut b = BanditState::new(c0, gamma);
            let pulls_s = rng.gen_range(1u32..40);
            let pulls_d = rng.gen_range(1u32..40);
            for _ in 0..pulls_s {
                b.record(Arm::Sparse, rng.gen_range(0.0..1.0));
            }
            for _ in 0..pulls_d {
                b.record(Arm::Dense, rng.gen_range(0.0..1.0));
            }

            let total = f64::from(pulls_s) + f64::from(pulls_d);
            let c = c0 * gamma.powi(t as i32);
            let value = |q: f64, n: f64| q / n + c * (total.ln() / n).sqrt();
            let vs = value(b.q(Arm::Sparse), b.n(Arm::Sparse));
            let vd = value(b.q(Arm::Dense), b.n(Arm::Dense));

            let expected = if vs >= vd { Arm::Sparse } else { Arm::Dense };
            if (vs - vd).abs() > 1e-12 {
                assert_eq!(
                    b.select_arm(t),
                    expected,
                    "selection must agree with direct formula (vs={vs}, vd={vd})"
                );
            }
            assert!((b.ucb(Arm::Sparse, t).unwrap() - vs).abs() < 1e-12);
            assert!((b.ucb(Arm::Dense, t).unwrap() - vd).abs() < 1e-12);
        }
    }

    #[test]
    fn decayed_exploration_defers_to_the_better_mean() {
        let mut b = BanditState::new(1.414, 0.9);
        // Dense has the better mean but fewer pulls; early on the bonus can
        // flip selection, late it cannot.
        for _ in 0..30 {
            b.record(Arm::Sparse, 0.4);
        }
        b.record(Arm::Dense, 0.9);
        assert_eq!(b.select_arm(0), Arm::Dense);
        for t in 200..220 {
            assert_eq!(
                b.select_arm(t),
                Arm::Dense,
                "with C(t) ~ 0 the higher mean must win"
            );
        }
    }
}
