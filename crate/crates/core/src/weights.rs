//! Doubly-robust per-subject weights and their weighted-classification view.
//!
//! For arm `a`,
//!
//! ```text
//! W_a = Y I(A = a) / pi(a; X) - (I(A = a) - pi(a; X)) / pi(a; X) * Q(X, a)
//! ```
//!
//! On the arm the subject did not receive this collapses to `Q(X, a)`.
//! Maximizing the augmented value over rules is the same as minimizing
//! `sum_a |W_a| I(sgn(W_a) a f(X) < 0)`, a weighted 0-1 loss with labels
//! `a sgn(W_a)` and weights `|W_a|`.

use serde::{Deserialize, Serialize};

use crate::data::{sgn, Dataset, PerArm, Treatment};
use crate::error::{EarlError, Result};
use crate::nuisance::{OutcomeRegression, PropensityScore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    /// `W_1`
    pub pos: f64,
    /// `W_{-1}`
    pub neg: f64,
}

impl WeightPair {
    #[inline]
    pub fn get(&self, a: Treatment) -> f64 {
        match a {
            Treatment::Pos => self.pos,
            Treatment::Neg => self.neg,
        }
    }

    /// Total weight placed on `phi(f)` and on `phi(-f)` respectively.
    #[inline]
    pub(crate) fn loss_split(&self) -> (f64, f64) {
        let mut on_pos = 0.0;
        let mut on_neg = 0.0;
        for inst in classification_view(self, 0) {
            match inst.label {
                Treatment::Pos => on_pos += inst.weight,
                Treatment::Neg => on_neg += inst.weight,
            }
        }
        (on_pos, on_neg)
    }
}

/// One weighted binary-classification example derived from a subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationInstance {
    pub label: Treatment,
    pub weight: f64,
    pub subject: usize,
}

/// Weights for a single subject.
///
/// `pi` must hold already-clipped probabilities in `(0, 1)`.
pub fn compute_weights(y: f64, a: Treatment, pi: PerArm<f64>, q: PerArm<f64>) -> Result<WeightPair> {
    for arm in Treatment::BOTH {
        let p = pi.get(arm);
        if !(p > 0.0 && p < 1.0) {
            return Err(EarlError::Domain(format!(
                "propensity for arm {arm} is {p}, outside (0, 1)"
            )));
        }
    }
    let w = |arm: Treatment| {
        let ind = if a == arm { 1.0 } else { 0.0 };
        let p = pi.get(arm);
        y * ind / p - (ind - p) / p * q.get(arm)
    };
    Ok(WeightPair {
        pos: w(Treatment::Pos),
        neg: w(Treatment::Neg),
    })
}

/// Weights for every subject, using the supplied nuisance estimates.
pub fn compute_all_weights(
    data: &Dataset,
    propensity: &dyn PropensityScore,
    outcome: &dyn OutcomeRegression,
) -> Result<Vec<WeightPair>> {
    (0..data.n())
        .map(|i| {
            let x = data.row(i);
            let pi = PerArm::new(propensity.prob(x, Treatment::Pos), propensity.prob(x, Treatment::Neg));
            let q = PerArm::new(outcome.predict(x, Treatment::Pos), outcome.predict(x, Treatment::Neg));
            compute_weights(data.outcome(i), data.treatment(i), pi, q)
        })
        .collect()
}

/// The two classification instances of a subject: `(sgn(W_1), |W_1|)` and
/// `(-sgn(W_{-1}), |W_{-1}|)`. Zero weights are kept.
pub fn classification_view(wp: &WeightPair, subject: usize) -> [ClassificationInstance; 2] {
    [
        ClassificationInstance {
            label: Treatment::from_sign(sgn(wp.pos)),
            weight: wp.pos.abs(),
            subject,
        },
        ClassificationInstance {
            label: Treatment::from_sign(-sgn(wp.neg)),
            weight: wp.neg.abs(),
            subject,
        },
    ]
}

/// Mean weighted 0-1 loss of the decisions `d_i` under the classification
/// view: `P_n[ |W_1| I(sgn(W_1) d < 0) + |W_{-1}| I(-sgn(W_{-1}) d < 0) ]`.
pub fn weighted_misclassification(weights: &[WeightPair], decisions: &[Treatment]) -> Result<f64> {
    if weights.len() != decisions.len() || weights.is_empty() {
        return Err(EarlError::shape("weights and decisions must be aligned and nonempty"));
    }
    let total: f64 = weights
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(i, (wp, d))| {
            classification_view(wp, i)
                .iter()
                .filter(|inst| inst.label != *d)
                .map(|inst| inst.weight)
                .sum::<f64>()
        })
        .sum();
    Ok(total / weights.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::ZeroOutcome;
    use crate::sim::{generate_scenario, Scenario, ScenarioSpec, TrueOutcome, TruePropensity};
    use proptest::prelude::*;

    fn arms(pos: f64, neg: f64) -> PerArm<f64> {
        PerArm::new(pos, neg)
    }

    #[test]
    fn hand_evaluated_weights() {
        let w = compute_weights(2.0, Treatment::Pos, arms(0.5, 0.5), arms(1.0, 0.5)).unwrap();
        assert_eq!(w.pos, 3.0);
        assert_eq!(w.neg, 0.5);
    }

    #[test]
    fn zero_outcome_model_gives_ipw_weight() {
        let w = compute_weights(2.0, Treatment::Pos, arms(0.5, 0.5), arms(0.0, 0.0)).unwrap();
        assert_eq!(w, WeightPair { pos: 4.0, neg: 0.0 });
    }

    #[test]
    fn zero_residual_returns_q() {
        let (q1, q0) = (1.7, -0.3);
        let w = compute_weights(q1, Treatment::Pos, arms(0.3, 0.7), arms(q1, q0)).unwrap();
        assert!((w.pos - q1).abs() < 1e-14);
        assert_eq!(w.neg, q0);
    }

    #[test]
    fn propensity_domain() {
        assert!(compute_weights(1.0, Treatment::Pos, arms(0.0, 1.0), arms(0.0, 0.0)).is_err());
        assert!(compute_weights(1.0, Treatment::Pos, arms(1.0, 0.5), arms(0.0, 0.0)).is_err());
        assert!(compute_weights(1.0, Treatment::Pos, arms(f64::NAN, 0.5), arms(0.0, 0.0)).is_err());
    }

    #[test]
    fn classification_view_examples() {
        let v = classification_view(&WeightPair { pos: 3.0, neg: 0.5 }, 7);
        assert_eq!((v[0].label, v[0].weight, v[0].subject), (Treatment::Pos, 3.0, 7));
        assert_eq!((v[1].label, v[1].weight), (Treatment::Neg, 0.5));
        let v = classification_view(&WeightPair { pos: 3.0, neg: -0.5 }, 0);
        assert_eq!((v[1].label, v[1].weight), (Treatment::Pos, 0.5));
        let v = classification_view(&WeightPair { pos: 0.0, neg: 0.0 }, 0);
        assert_eq!((v[0].label, v[0].weight), (Treatment::Pos, 0.0));
        assert_eq!((v[1].label, v[1].weight), (Treatment::Neg, 0.0));
    }

    #[test]
    fn loss_split_routes_weights() {
        assert_eq!(WeightPair { pos: 3.0, neg: 0.5 }.loss_split(), (3.0, 0.5));
        assert_eq!(WeightPair { pos: -3.0, neg: -0.5 }.loss_split(), (0.5, 3.0));
    }

    #[test]
    fn unobserved_arm_identity_on_simulated_data() {
        let d = generate_scenario(&ScenarioSpec::new(Scenario::One, 300), 5);
        let prop = TruePropensity::new(Scenario::One);
        let q = TrueOutcome;
        let w = compute_all_weights(&d, &prop, &q).unwrap();
        for (i, wp) in w.iter().enumerate() {
            let other = d.treatment(i).opposite();
            assert_eq!(wp.get(other), q.predict(d.row(i), other));
        }
        let w0 = compute_all_weights(&d, &prop, &ZeroOutcome).unwrap();
        for (i, wp) in w0.iter().enumerate() {
            let a = d.treatment(i);
            assert_eq!(wp.get(a.opposite()), 0.0);
            let p = prop.prob(d.row(i), a);
            assert_eq!(wp.get(a), d.outcome(i) / p);
        }
    }

    #[test]
    fn mean_weight_estimates_value_of_always_treat() {
        // With the true nuisances, E[W_1] = E[Q(X, 1)] = 10 - 0.1.
        let n = 1_000_000;
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, n), 99);
        let w = compute_all_weights(&d, &TruePropensity::new(Scenario::Two), &TrueOutcome).unwrap();
        let vals: Vec<f64> = w.iter().map(|wp| wp.pos).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 9.9).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    proptest! {
        #[test]
        fn unobserved_arm_is_exact(
            y in -50f64..50.0,
            pos in any::<bool>(),
            p1 in 0.01f64..0.99,
            q1 in -50f64..50.0,
            q0 in -50f64..50.0,
        ) {
            let a = if pos { Treatment::Pos } else { Treatment::Neg };
            let w = compute_weights(y, a, arms(p1, 1.0 - p1), arms(q1, q0)).unwrap();
            let q = arms(q1, q0);
            prop_assert_eq!(w.get(a.opposite()), q.get(a.opposite()));
        }
    }
}
