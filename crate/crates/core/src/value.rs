//! Value estimators for a fixed rule.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Treatment};
use crate::earl::CrossFitFold;
use crate::error::{EarlError, Result};
use crate::nuisance::{OutcomeRegression, PropensityScore};
use crate::rule::LinearRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ipwe,
    Aipwe,
    IpweNormalized,
    CrossfitAggregate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    #[serde(rename = "estimator")]
    pub kind: EstimatorKind,
    #[serde(rename = "value")]
    pub estimate: f64,
    /// Subjects whose observed treatment agrees with the rule.
    pub n_effective: usize,
}

fn check_aligned(data: &Dataset, decisions: &[Treatment]) -> Result<()> {
    if decisions.len() != data.n() {
        return Err(EarlError::shape(format!(
            "{} decisions for {} subjects",
            decisions.len(),
            data.n()
        )));
    }
    Ok(())
}

/// `P_n[ Y I(A = d) / pi(A; X) ]` for explicit per-subject decisions.
pub fn ipwe_for_decisions(
    data: &Dataset,
    decisions: &[Treatment],
    propensity: &dyn PropensityScore,
) -> Result<ValueEstimate> {
    check_aligned(data, decisions)?;
    let mut sum = 0.0;
    let mut matched = 0;
    for (i, &d) in decisions.iter().enumerate() {
        let a = data.treatment(i);
        if a == d {
            sum += data.outcome(i) / propensity.prob(data.row(i), a);
            matched += 1;
        }
    }
    Ok(ValueEstimate {
        kind: EstimatorKind::Ipwe,
        estimate: sum / data.n() as f64,
        n_effective: matched,
    })
}

/// Per-subject augmented contribution for recommending `d`:
/// `Y I(A = d) / pi(d; X) - (I(A = d) - pi(d; X)) / pi(d; X) * Q(X, d)`.
#[inline]
pub(crate) fn aipwe_term(
    y: f64,
    a: Treatment,
    d: Treatment,
    x: &[f64],
    propensity: &dyn PropensityScore,
    outcome: &dyn OutcomeRegression,
) -> f64 {
    let ind = if a == d { 1.0 } else { 0.0 };
    let p = propensity.prob(x, d);
    y * ind / p - (ind - p) / p * outcome.predict(x, d)
}

pub fn aipwe_for_decisions(
    data: &Dataset,
    decisions: &[Treatment],
    propensity: &dyn PropensityScore,
    outcome: &dyn OutcomeRegression,
) -> Result<ValueEstimate> {
    check_aligned(data, decisions)?;
    let mut sum = 0.0;
    let mut matched = 0;
    for (i, &d) in decisions.iter().enumerate() {
        let a = data.treatment(i);
        matched += usize::from(a == d);
        sum += aipwe_term(data.outcome(i), a, d, data.row(i), propensity, outcome);
    }
    Ok(ValueEstimate {
        kind: EstimatorKind::Aipwe,
        estimate: sum / data.n() as f64,
        n_effective: matched,
    })
}

/// Weighted mean of outcomes among subjects who followed the rule, weights
/// `1 / pi(A; X)`.
pub fn ipwe_normalized_for_decisions(
    data: &Dataset,
    decisions: &[Treatment],
    propensity: &dyn PropensityScore,
) -> Result<ValueEstimate> {
    check_aligned(data, decisions)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut matched = 0;
    for (i, &d) in decisions.iter().enumerate() {
        let a = data.treatment(i);
        if a == d {
            let w = 1.0 / propensity.prob(data.row(i), a);
            num += data.outcome(i) * w;
            den += w;
            matched += 1;
        }
    }
    if matched == 0 || den == 0.0 {
        return Err(EarlError::Unsupported(
            "no subject received the recommended treatment; the normalized estimator is undefined".into(),
        ));
    }
    Ok(ValueEstimate {
        kind: EstimatorKind::IpweNormalized,
        estimate: num / den,
        n_effective: matched,
    })
}

pub fn value_ipwe(data: &Dataset, rule: &LinearRule, propensity: &dyn PropensityScore) -> Result<ValueEstimate> {
    ipwe_for_decisions(data, &rule.decisions(data)?, propensity)
}

pub fn value_aipwe(
    data: &Dataset,
    rule: &LinearRule,
    propensity: &dyn PropensityScore,
    outcome: &dyn OutcomeRegression,
) -> Result<ValueEstimate> {
    aipwe_for_decisions(data, &rule.decisions(data)?, propensity, outcome)
}

pub fn value_ipwe_normalized(
    data: &Dataset,
    rule: &LinearRule,
    propensity: &dyn PropensityScore,
) -> Result<ValueEstimate> {
    ipwe_normalized_for_decisions(data, &rule.decisions(data)?, propensity)
}

/// Mean of per-fold estimates.
pub fn aggregate_fold_values(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(EarlError::shape("aggregation needs at least two folds"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Cross-fitted value: each fold's rule is scored by the augmented estimator
/// on the subjects it was trained on, with that fold's nuisance models, and
/// the fold scores are averaged.
pub fn value_crossfit_aggregate(data: &Dataset, folds: &[CrossFitFold]) -> Result<ValueEstimate> {
    if folds.len() < 2 {
        return Err(EarlError::shape(format!(
            "cross-fit aggregate needs at least two fold artifacts, got {}",
            folds.len()
        )));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut matched = 0;
    for fold in folds {
        let sub = data.subset(&fold.erm_indices);
        let v = value_aipwe(&sub, &fold.fit.rule, &fold.nuisance, &fold.nuisance)?;
        matched += v.n_effective;
        per_fold.push(v.estimate);
    }
    Ok(ValueEstimate {
        kind: EstimatorKind::CrossfitAggregate,
        estimate: aggregate_fold_values(&per_fold)?,
        n_effective: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMap;
    use crate::nuisance::ZeroOutcome;
    use crate::sim::{generate_scenario, Scenario, ScenarioSpec, TrueOutcome, TruePropensity};
    use proptest::prelude::*;

    fn one_subject(y: f64, a: Treatment) -> Dataset {
        Dataset::from_rows(&[vec![0.0]], vec![a], vec![y]).unwrap()
    }

    fn constant(p: f64) -> impl Fn(&[f64], Treatment) -> f64 + Sync {
        move |_: &[f64], _| p
    }

    #[test]
    fn ipwe_examples() {
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 50), 1);
        let observed = d.treatments().to_vec();
        let v = ipwe_for_decisions(&d, &observed, &constant(1.0)).unwrap();
        assert!((v.estimate - d.mean_outcome()).abs() < 1e-12);
        assert_eq!(v.n_effective, 50);
        let flipped: Vec<_> = observed.iter().map(|a| a.opposite()).collect();
        let v = ipwe_for_decisions(&d, &flipped, &constant(0.5)).unwrap();
        assert_eq!(v.estimate, 0.0);
        assert_eq!(v.n_effective, 0);
        let v = ipwe_for_decisions(&one_subject(3.0, Treatment::Pos), &[Treatment::Pos], &constant(0.5)).unwrap();
        assert_eq!(v.estimate, 6.0);
    }

    #[test]
    fn aipwe_examples() {
        let q = |_: &[f64], _: Treatment| 123.0;
        struct Q<F>(F);
        impl<F: Fn(&[f64], Treatment) -> f64 + Sync> OutcomeRegression for Q<F> {
            fn predict(&self, x: &[f64], a: Treatment) -> f64 {
                (self.0)(x, a)
            }
        }
        let v = aipwe_for_decisions(&one_subject(2.5, Treatment::Neg), &[Treatment::Neg], &constant(1.0), &Q(q)).unwrap();
        assert_eq!(v.estimate, 2.5);

        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 40), 3);
        let flipped: Vec<_> = d.treatments().iter().map(|a| a.opposite()).collect();
        let prop = TruePropensity::new(Scenario::Two);
        let v = aipwe_for_decisions(&d, &flipped, &prop, &TrueOutcome).unwrap();
        let expect: f64 = (0..d.n())
            .map(|i| TrueOutcome.predict(d.row(i), flipped[i]))
            .sum::<f64>()
            / d.n() as f64;
        assert!((v.estimate - expect).abs() < 1e-12);
    }

    #[test]
    fn aipwe_equals_ipwe_without_outcome_model() {
        let d = generate_scenario(&ScenarioSpec::new(Scenario::One, 200), 8);
        let prop = TruePropensity::new(Scenario::One);
        let rule = LinearRule::new(0.2, vec![1.0, -1.0], FeatureMap::parse("x1,x3", 10).unwrap()).unwrap();
        let a = value_aipwe(&d, &rule, &prop, &ZeroOutcome).unwrap();
        let b = value_ipwe(&d, &rule, &prop).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
        assert_eq!(a.n_effective, b.n_effective);
    }

    #[test]
    fn printed_form_matches_observed_arm_form() {
        // Using pi(d; X) in the first term agrees with pi(A; X) because the
        // indicator kills every term where they differ.
        let d = generate_scenario(&ScenarioSpec::new(Scenario::One, 300), 4);
        let prop = TruePropensity::new(Scenario::One);
        let dec: Vec<Treatment> = (0..d.n()).map(|i| Treatment::from_sign(d.row(i)[2])).collect();
        let v = aipwe_for_decisions(&d, &dec, &prop, &TrueOutcome).unwrap();
        let alt: f64 = (0..d.n())
            .map(|i| {
                let (x, a, y, di) = (d.row(i), d.treatment(i), d.outcome(i), dec[i]);
                let ind = if a == di { 1.0 } else { 0.0 };
                let ipw = if a == di { y / prop.prob(x, a) } else { 0.0 };
                let pd = prop.prob(x, di);
                ipw - (ind - pd) / pd * TrueOutcome.predict(x, di)
            })
            .sum::<f64>()
            / d.n() as f64;
        assert!((v.estimate - alt).abs() < 1e-12);
    }

    #[test]
    fn normalized_examples() {
        let v = ipwe_normalized_for_decisions(&one_subject(3.0, Treatment::Pos), &[Treatment::Pos], &constant(0.13)).unwrap();
        assert!((v.estimate - 3.0).abs() < 1e-15);
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 30), 2);
        let v = ipwe_normalized_for_decisions(&d, d.treatments(), &constant(0.4)).unwrap();
        assert!((v.estimate - d.mean_outcome()).abs() < 1e-12);
        let c = d.with_outcomes(vec![-7.5; 30]).unwrap();
        let prop = TruePropensity::new(Scenario::Two);
        let dec: Vec<Treatment> = (0..30).map(|i| Treatment::from_sign(c.row(i)[0])).collect();
        let v = ipwe_normalized_for_decisions(&c, &dec, &prop).unwrap();
        assert!((v.estimate + 7.5).abs() < 1e-12);
        let flipped: Vec<_> = d.treatments().iter().map(|a| a.opposite()).collect();
        assert!(matches!(
            ipwe_normalized_for_decisions(&d, &flipped, &constant(0.5)),
            Err(EarlError::Unsupported(_))
        ));
    }

    #[test]
    fn fold_aggregation() {
        assert_eq!(aggregate_fold_values(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(aggregate_fold_values(&[0.7; 5]).unwrap(), 0.7);
        assert!(aggregate_fold_values(&[1.0]).is_err());
        let d = one_subject(1.0, Treatment::Pos);
        assert!(value_crossfit_aggregate(&d, &[]).is_err());
    }

    #[test]
    fn misaligned_decisions() {
        let d = one_subject(1.0, Treatment::Pos);
        assert!(ipwe_for_decisions(&d, &[], &constant(0.5)).is_err());
    }

    proptest! {
        #[test]
        fn normalized_is_scale_invariant(seed in 0u64..1000, c in 0.05f64..1.0) {
            let d = generate_scenario(&ScenarioSpec::new(Scenario::One, 60), seed);
            let prop = TruePropensity::new(Scenario::One);
            let scaled = move |x: &[f64], a: Treatment| c * prop.prob(x, a);
            let dec: Vec<Treatment> = (0..60).map(|i| Treatment::from_sign(d.row(i)[1])).collect();
            let a = ipwe_normalized_for_decisions(&d, &dec, &prop);
            let b = ipwe_normalized_for_decisions(&d, &dec, &scaled);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.estimate - b.estimate).abs() <= 1e-12 * (1.0 + a.estimate.abs()));
            }
        }
    }
}
