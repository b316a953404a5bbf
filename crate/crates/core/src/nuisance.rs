//! Nuisance models: the propensity score `pi(a; x)` and the outcome
//! regression `Q(x, a)`.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Treatment};
use crate::error::{EarlError, Result};
use crate::features::{Basis, FeatureMap, FeatureSpec, Term};
use crate::linalg::{dot, solve_spd, weighted_gram};
use crate::rule::LinearRule;

/// Anything that can report `pi(a; x)`.
pub trait PropensityScore: Sync {
    fn prob(&self, x: &[f64], a: Treatment) -> f64;
}

/// Anything that can report `Q(x, a)`.
pub trait OutcomeRegression: Sync {
    fn predict(&self, x: &[f64], a: Treatment) -> f64;
}

impl<F: Fn(&[f64], Treatment) -> f64 + Sync> PropensityScore for F {
    fn prob(&self, x: &[f64], a: Treatment) -> f64 {
        self(x, a)
    }
}

/// `Q(x, a) = 0` everywhere; turns the augmented weights into plain
/// inverse-probability weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroOutcome;

impl OutcomeRegression for ZeroOutcome {
    fn predict(&self, _x: &[f64], _a: Treatment) -> f64 {
        0.0
    }
}

/// Lower and upper bounds applied to every predicted propensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub lo: f64,
    pub hi: f64,
}

impl Clip {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(EarlError::config(format!(
                "propensity clip ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        Ok(Clip { lo, hi })
    }

    #[inline]
    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

impl Default for Clip {
    fn default() -> Self {
        Clip { lo: 0.01, hi: 0.99 }
    }
}

#[inline]
pub(crate) fn expit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

#[inline]
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Logistic model `pi(1; x) = expit(gamma . features(x))`, clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub features: FeatureMap,
    pub gamma: Vec<f64>,
    pub clip: Clip,
    pub ridge: f64,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted iteration, starting at
    /// `gamma = 0`.
    pub objective_trace: Vec<f64>,
}

impl PropensityModel {
    /// Unclipped `pi(1; x)`.
    pub fn raw_prob_treated(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.features.len()];
        self.features.fill(x, Treatment::Pos, &mut z);
        expit(dot(&z, &self.gamma))
    }

    /// `pi(a; x)` before clipping. The two arms sum to one.
    pub fn raw_prob(&self, x: &[f64], a: Treatment) -> f64 {
        let p1 = self.raw_prob_treated(x);
        match a {
            Treatment::Pos => p1,
            Treatment::Neg => 1.0 - p1,
        }
    }

    /// Clipped `pi(a; x)`. After clipping the two arms need not sum to one.
    pub fn predict(&self, x: &[f64], a: Treatment) -> Result<f64> {
        self.features.check_dim(x)?;
        Ok(self.clip.apply(self.raw_prob(x, a)))
    }
}

impl PropensityScore for PropensityModel {
    fn prob(&self, x: &[f64], a: Treatment) -> f64 {
        self.clip.apply(self.raw_prob(x, a))
    }
}

const IRLS_MAX_ITER: usize = 100;
const IRLS_SCORE_TOL: f64 = 1e-8;

/// Ridge-penalized logistic regression of `I(A = 1)` on `features(x)` by
/// iteratively reweighted least squares with step halving.
///
/// The penalty is `ridge / 2 * |gamma|^2` over every coefficient except the
/// intercept.
pub fn fit_propensity(
    data: &Dataset,
    features: &FeatureMap,
    ridge: f64,
    clip: Clip,
) -> Result<PropensityModel> {
    if features.has_treatment_terms() {
        return Err(EarlError::config("propensity features cannot depend on treatment"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(EarlError::config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let counts = data.arm_counts();
    if ridge == 0.0 && (counts.pos == 0 || counts.neg == 0) {
        return Err(EarlError::NonConvergence(
            "only one treatment arm present; the logistic fit diverges without a ridge penalty (set ridge > 0)"
                .into(),
        ));
    }

    let n = data.n();
    let q = features.len();
    let z = features.design(data, None)?;
    let target: Vec<f64> = data
        .treatments()
        .iter()
        .map(|&a| if a == Treatment::Pos { 1.0 } else { 0.0 })
        .collect();
    let mask: Vec<f64> = features
        .terms()
        .iter()
        .map(|t| if t.basis == Basis::Intercept && !t.crossed { 0.0 } else { 1.0 })
        .collect();

    let linear_predictor = |gamma: &[f64]| -> Vec<f64> {
        z.chunks_exact(q.max(1)).take(n).map(|row| dot(&row[..q], gamma)).collect()
    };
    let objective = |gamma: &[f64], eta: &[f64]| -> f64 {
        let ll: f64 = eta.iter().zip(&target).map(|(e, y)| y * e - softplus(*e)).sum();
        let pen: f64 = gamma.iter().zip(&mask).map(|(g, m)| m * g * g).sum();
        ll - 0.5 * ridge * pen
    };

    let mut gamma = vec![0.0; q];
    let mut eta = linear_predictor(&gamma);
    let mut obj = objective(&gamma, &eta);
    let mut trace = vec![obj];
    let mut converged = false;

    for _ in 0..IRLS_MAX_ITER {
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let mut score = vec![0.0; q];
        for (i, row) in z.chunks_exact(q.max(1)).take(n).enumerate() {
            let r = target[i] - mu[i];
            for (s, zk) in score.iter_mut().zip(&row[..q]) {
                *s += r * zk;
            }
        }
        for k in 0..q {
            score[k] -= ridge * mask[k] * gamma[k];
        }
        if score.iter().all(|s| s.abs() < IRLS_SCORE_TOL) {
            converged = true;
            break;
        }

        let mut info = weighted_gram(&z, |i| mu[i] * (1.0 - mu[i]), q);
        for k in 0..q {
            info[(k, k)] += ridge * mask[k];
        }
        let step = solve_spd(&info, &score, 1e-14).ok_or_else(|| {
            EarlError::numerical("singular weighted normal equations in the propensity fit")
        })?;
        // Predicted ascent of the Newton step; once it is at rounding level
        // the score cannot shrink further.
        if dot(&score, &step) <= 1e-15 * (1.0 + obj.abs()) {
            converged = true;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = gamma.iter().zip(&step).map(|(g, s)| g + t * s).collect();
            let cand_eta = linear_predictor(&cand);
            let cand_obj = objective(&cand, &cand_eta);
            if cand_obj >= obj {
                accepted = Some((cand, cand_eta, cand_obj));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((g, e, o)) => {
                gamma = g;
                eta = e;
                obj = o;
                trace.push(obj);
            }
            // No ascent left at machine precision.
            None => {
                converged = true;
                break;
            }
        }
    }

    if ridge == 0.0 {
        let separated = eta
            .iter()
            .zip(&target)
            .all(|(e, y)| (y - expit(*e)).abs() < 1e-6);
        let diverging = !converged && eta.iter().any(|e| e.abs() > 30.0);
        if separated || diverging || gamma.iter().any(|g| !g.is_finite()) {
            return Err(EarlError::NonConvergence(
                "logistic propensity fit did not converge (perfect separation?); set ridge > 0".into(),
            ));
        }
    }

    Ok(PropensityModel {
        features: features.clone(),
        gamma,
        clip,
        ridge,
        converged,
        objective_trace: trace,
    })
}

/// Linear model `Q(x, a) = theta . features(x, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeModel {
    pub features: FeatureMap,
    pub theta: Vec<f64>,
    /// A `1e-8` diagonal was added because the design was rank deficient.
    pub ridge_fallback: bool,
    /// Some training prediction exceeded ten times the largest `|Y|`.
    pub exceeds_outcome_bound: bool,
}

impl OutcomeModel {
    pub fn predict_checked(&self, x: &[f64], a: Treatment) -> Result<f64> {
        self.features.check_dim(x)?;
        Ok(self.predict(x, a))
    }

    /// The rule `sgn{Q(x, 1) - Q(x, -1)}` written as a linear rule: every
    /// treatment-crossed term contributes twice its coefficient.
    pub fn contrast_rule(&self) -> LinearRule {
        let mut beta0 = 0.0;
        let mut terms = Vec::new();
        let mut beta = Vec::new();
        for (t, th) in self.features.terms().iter().zip(&self.theta) {
            if !t.crossed {
                continue;
            }
            if t.basis == Basis::Intercept {
                beta0 += 2.0 * th;
            } else {
                terms.push(Term { basis: t.basis, crossed: false });
                beta.push(2.0 * th);
            }
        }
        let map = FeatureMap::new(self.features.p(), terms)
            .expect("crossed terms of a valid map form a valid map");
        LinearRule::new(beta0, beta, map).expect("shapes agree by construction")
    }
}

impl OutcomeRegression for OutcomeModel {
    fn predict(&self, x: &[f64], a: Treatment) -> f64 {
        let mut z = vec![0.0; self.features.len()];
        self.features.fill(x, a, &mut z);
        dot(&z, &self.theta)
    }
}

const OLS_FALLBACK_RIDGE: f64 = 1e-8;

/// Least squares of `Y` on `features(x, A)`.
pub fn fit_outcome(data: &Dataset, features: &FeatureMap) -> Result<OutcomeModel> {
    let n = data.n();
    let q = features.len();
    let z = features.design(data, None)?;
    let gram = weighted_gram(&z, |_| 1.0, q);
    let mut rhs = vec![0.0; q];
    for (i, row) in z.chunks_exact(q.max(1)).take(n).enumerate() {
        let y = data.outcome(i);
        for (r, zk) in rhs.iter_mut().zip(&row[..q]) {
            *r += y * zk;
        }
    }

    let (theta, ridge_fallback) = match solve_spd(&gram, &rhs, 1e-12) {
        Some(t) => (t, false),
        None => {
            log::warn!("outcome design is rank deficient; adding {OLS_FALLBACK_RIDGE} to the diagonal");
            let mut g = gram.clone();
            for k in 0..q {
                g[(k, k)] += OLS_FALLBACK_RIDGE;
            }
            let t = solve_spd(&g, &rhs, 0.0)
                .ok_or_else(|| EarlError::numerical("outcome normal equations are singular"))?;
            (t, true)
        }
    };

    let max_y = data.outcomes().iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let mut model = OutcomeModel {
        features: features.clone(),
        theta,
        ridge_fallback,
        exceeds_outcome_bound: false,
    };
    let bound = 10.0 * max_y;
    model.exceeds_outcome_bound = (0..n).any(|i| {
        Treatment::BOTH
            .iter()
            .any(|&a| model.predict(data.row(i), a).abs() > bound)
    });
    if model.exceeds_outcome_bound {
        log::warn!("outcome predictions exceed ten times max |Y| on the training data");
    }
    Ok(model)
}

/// Which nuisance models to fit, by feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpec {
    pub propensity_features: FeatureSpec,
    /// `None` means `Q = 0`.
    pub outcome_features: Option<FeatureSpec>,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub clip: Clip,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec {
            propensity_features: FeatureSpec::new("linear"),
            outcome_features: Some(FeatureSpec::new("linear*a")),
            ridge: 0.0,
            clip: Clip::default(),
        }
    }
}

/// Both fitted nuisance models.
#[derive(Clone, Debug)]
pub struct FittedNuisance {
    pub propensity: PropensityModel,
    pub outcome: Option<OutcomeModel>,
}

impl PropensityScore for FittedNuisance {
    fn prob(&self, x: &[f64], a: Treatment) -> f64 {
        self.propensity.prob(x, a)
    }
}

impl OutcomeRegression for FittedNuisance {
    fn predict(&self, x: &[f64], a: Treatment) -> f64 {
        self.outcome.as_ref().map_or(0.0, |m| m.predict(x, a))
    }
}

pub fn fit_nuisance(data: &Dataset, spec: &NuisanceSpec) -> Result<FittedNuisance> {
    let pmap = spec.propensity_features.resolve(data.p())?;
    let propensity = fit_propensity(data, &pmap, spec.ridge, spec.clip)?;
    let outcome = match &spec.outcome_features {
        Some(f) => Some(fit_outcome(data, &f.resolve(data.p())?)?),
        None => None,
    };
    Ok(FittedNuisance { propensity, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, Scenario, ScenarioSpec};
    use proptest::prelude::*;

    fn map(s: &str, p: usize) -> FeatureMap {
        FeatureMap::parse(s, p).unwrap()
    }

    fn balanced(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let a = (0..n)
            .map(|i| if i % 2 == 0 { Treatment::Pos } else { Treatment::Neg })
            .collect();
        Dataset::from_rows(&rows, a, vec![0.0; n]).unwrap()
    }

    #[test]
    fn intercept_only_balanced_gives_half() {
        let d = balanced(40);
        let m = fit_propensity(&d, &map("intercept", 1), 0.0, Clip::default()).unwrap();
        assert!(m.gamma[0].abs() < 1e-12);
        assert_eq!(m.predict(&[0.3], Treatment::Pos).unwrap(), 0.5);
        assert_eq!(m.predict(&[0.3], Treatment::Neg).unwrap(), 0.5);
    }

    #[test]
    fn clipping_bounds_predictions() {
        let m = PropensityModel {
            features: map("intercept", 1),
            gamma: vec![(0.005f64 / 0.995).ln()],
            clip: Clip::default(),
            ridge: 0.0,
            converged: true,
            objective_trace: vec![],
        };
        assert!((m.raw_prob(&[0.0], Treatment::Pos) - 0.005).abs() < 1e-12);
        assert_eq!(m.predict(&[0.0], Treatment::Pos).unwrap(), 0.01);
        assert_eq!(m.predict(&[0.0], Treatment::Neg).unwrap(), 0.99);
        let half = PropensityModel { gamma: vec![0.0], ..m };
        assert_eq!(half.predict(&[0.0], Treatment::Pos).unwrap(), 0.5);
        let narrow = PropensityModel { clip: Clip::new(0.4, 0.5).unwrap(), ..half };
        assert_eq!(narrow.predict(&[0.0], Treatment::Pos).unwrap(), 0.5);
    }

    #[test]
    fn clip_validation() {
        assert!(Clip::new(0.0, 0.5).is_err());
        assert!(Clip::new(0.6, 0.5).is_err());
        assert!(Clip::new(0.1, 1.0).is_err());
        assert!(Clip::new(0.2, 0.2).is_ok());
    }

    #[test]
    fn separation_requires_ridge() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 9.5]).collect();
        let a = (0..20)
            .map(|i| if i >= 10 { Treatment::Pos } else { Treatment::Neg })
            .collect();
        let d = Dataset::from_rows(&rows, a, vec![0.0; 20]).unwrap();
        let err = fit_propensity(&d, &map("linear", 1), 0.0, Clip::default()).unwrap_err();
        assert!(matches!(err, EarlError::NonConvergence(ref m) if m.contains("ridge")));
        let ok = fit_propensity(&d, &map("linear", 1), 1.0, Clip::default()).unwrap();
        assert!(ok.converged);
        assert!(ok.gamma[1] > 0.0);
    }

    #[test]
    fn single_arm_without_ridge_is_an_error() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let d = Dataset::from_rows(&rows, vec![Treatment::Pos; 5], vec![0.0; 5]).unwrap();
        assert!(fit_propensity(&d, &map("linear", 1), 0.0, Clip::default()).is_err());
    }

    #[test]
    fn irls_objective_is_nondecreasing() {
        for (scenario, ridge) in [(Scenario::One, 0.0), (Scenario::Two, 0.0), (Scenario::One, 2.0)] {
            let d = generate_scenario(&ScenarioSpec::new(scenario, 500), 11);
            let m = fit_propensity(&d, &map("linear+interactions", 10), ridge, Clip::default()).unwrap();
            assert!(m.converged);
            for w in m.objective_trace.windows(2) {
                assert!(w[1] >= w[0], "objective decreased: {w:?}");
            }
        }
    }

    #[test]
    fn recovers_scenario_two_propensity() {
        // Scenario 2: logit pi(1; x) = 0.5 x1 - 0.5.
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 50_000), 2024);
        let m = fit_propensity(&d, &map("1,x1", 10), 0.0, Clip::default()).unwrap();
        assert!((m.gamma[0] + 0.5).abs() < 0.1, "{:?}", m.gamma);
        assert!((m.gamma[1] - 0.5).abs() < 0.1, "{:?}", m.gamma);
    }

    #[test]
    fn constant_outcome_fit() {
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 200), 3);
        let d = d.with_outcomes(vec![4.25; 200]).unwrap();
        let m = fit_outcome(&d, &map("linear*a", 10)).unwrap();
        assert!((m.theta[0] - 4.25).abs() < 1e-9);
        assert!(m.theta[1..].iter().all(|t| t.abs() < 1e-9));
    }

    #[test]
    fn exactly_determined_system_interpolates() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![-1.0]];
        let a = vec![Treatment::Pos, Treatment::Neg, Treatment::Pos, Treatment::Neg];
        let d = Dataset::from_rows(&rows, a, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let m = fit_outcome(&d, &map("linear*a", 1)).unwrap();
        assert!(!m.ridge_fallback);
        for i in 0..4 {
            let r = d.outcome(i) - m.predict(d.row(i), d.treatment(i));
            assert!(r.abs() < 1e-10, "residual {r}");
        }
    }

    #[test]
    fn rank_deficiency_triggers_fallback() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0], vec![0.0, 0.0]];
        let d = Dataset::from_rows(&rows, vec![Treatment::Pos; 4], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let m = fit_outcome(&d, &map("linear", 2)).unwrap();
        assert!(m.ridge_fallback);
        assert!(m.theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        let d = generate_scenario(&ScenarioSpec::new(Scenario::One, 800), 9);
        let fm = map("quadratic*a", 10);
        let m = fit_outcome(&d, &fm).unwrap();
        assert!(!m.ridge_fallback);
        let z = fm.design(&d, None).unwrap();
        let q = fm.len();
        let resid: Vec<f64> = (0..d.n()).map(|i| d.outcome(i) - m.predict(d.row(i), d.treatment(i))).collect();
        for k in 0..q {
            let col: Vec<f64> = (0..d.n()).map(|i| z[i * q + k]).collect();
            let ip = dot(&col, &resid);
            let norm = dot(&col, &col).sqrt();
            assert!(ip.abs() < 1e-6 * d.n() as f64 * norm, "column {k}: {ip}");
        }
    }

    #[test]
    fn recovers_scenario_two_contrast() {
        // Q(x, a) = sum x^2 + sum x + a (x1 + x2 - 0.1).
        let d = generate_scenario(&ScenarioSpec::new(Scenario::Two, 50_000), 77);
        let fm = map("linear,quadratic,a,a*x1,a*x2", 10);
        let m = fit_outcome(&d, &fm).unwrap();
        let k = fm.position(Term { basis: Basis::Coord(0), crossed: true }).unwrap();
        assert!((m.theta[k] - 1.0).abs() < 0.05, "theta = {}", m.theta[k]);
    }

    #[test]
    fn prediction_examples() {
        let zero = OutcomeModel {
            features: map("linear*a", 2),
            theta: vec![0.0; 6],
            ridge_fallback: false,
            exceeds_outcome_bound: false,
        };
        assert_eq!(zero.predict(&[1.0, 2.0], Treatment::Pos), 0.0);
        let constant = OutcomeModel { features: map("intercept", 2), theta: vec![2.0], ..zero.clone() };
        assert_eq!(constant.predict(&[5.0, -1.0], Treatment::Neg), 2.0);
        let crossed = OutcomeModel { features: map("1,a*x1", 1), theta: vec![0.0, 1.0], ..zero };
        let diff = crossed.predict(&[3.0], Treatment::Pos) - crossed.predict(&[3.0], Treatment::Neg);
        assert_eq!(diff, 6.0);
        let rule = crossed.contrast_rule();
        assert_eq!(rule.beta0, 0.0);
        assert_eq!(rule.beta, vec![2.0]);
        assert!(crossed.predict_checked(&[1.0, 2.0], Treatment::Pos).is_err());
    }

    proptest! {
        #[test]
        fn predictions_respect_clip(
            gamma in proptest::collection::vec(-20f64..20.0, 3),
            x in proptest::collection::vec(-5f64..5.0, 2),
            lo in 0.001f64..0.3,
            width in 0.0f64..0.6,
        ) {
            let clip = Clip::new(lo, (lo + width).min(0.999)).unwrap();
            let m = PropensityModel {
                features: map("linear", 2),
                gamma,
                clip,
                ridge: 0.0,
                converged: true,
                objective_trace: vec![],
            };
            for a in Treatment::BOTH {
                let p = m.predict(&x, a).unwrap();
                prop_assert!(p >= clip.lo && p <= clip.hi);
            }
            let s = m.raw_prob(&x, Treatment::Pos) + m.raw_prob(&x, Treatment::Neg);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
