//! Comparator estimators: Q-learning, outcome weighted learning, and direct
//! maximization of the augmented value by a genetic algorithm.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Treatment};
use crate::earl::{earl_fit, EarlConfig};
use crate::error::{EarlError, Result};
use crate::features::{FeatureMap, FeatureSpec, Term};
use crate::linalg::{dot, norm};
use crate::loss::SurrogateLoss;
use crate::nuisance::{fit_outcome, OutcomeRegression, PropensityScore, ZeroOutcome};
use crate::rng::{stream_key, stream_rng};
use crate::rule::LinearRule;
use crate::value::aipwe_term;
use crate::weights::compute_all_weights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Qlearning,
    Owl,
    AipweDirect,
}

#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub rule: LinearRule,
    /// Penalized hinge objective (OWL).
    pub objective_value: Option<f64>,
    /// Amount added to every outcome before weighting (OWL); zero when all
    /// outcomes were already nonnegative.
    pub outcome_shift: f64,
    /// Best augmented value after each generation (direct search).
    pub fitness_trace: Vec<f64>,
}

impl BaselineFit {
    fn new(method: BaselineMethod, rule: LinearRule) -> Self {
        BaselineFit {
            method,
            rule,
            objective_value: None,
            outcome_shift: 0.0,
            fitness_trace: Vec::new(),
        }
    }
}

/// Least-squares `Q`, then `d(x) = sgn{Q(x, 1) - Q(x, -1)}`.
pub fn qlearning_fit(data: &Dataset, outcome_features: &FeatureMap) -> Result<BaselineFit> {
    let model = fit_outcome(data, outcome_features)?;
    Ok(BaselineFit::new(BaselineMethod::Qlearning, model.contrast_rule()))
}

/// Hinge-loss fit with `Q = 0`: subject `i` enters with label `A_i` and
/// weight `Y_i / pi(A_i; X_i)`. Outcomes are shifted up to be nonnegative
/// first.
pub fn owl_fit(data: &Dataset, propensity: &dyn PropensityScore, config: &EarlConfig) -> Result<BaselineFit> {
    let min_y = data.outcomes().iter().copied().fold(f64::INFINITY, f64::min);
    let shift = -min_y.min(0.0);
    let shifted;
    let data = if shift > 0.0 {
        log::warn!("outcome weighted learning: outcomes shifted by {shift} to be nonnegative");
        shifted = data.with_outcomes(data.outcomes().iter().map(|y| y + shift).collect())?;
        &shifted
    } else {
        data
    };
    let weights = compute_all_weights(data, propensity, &ZeroOutcome)?;
    let config = EarlConfig {
        loss: SurrogateLoss::Hinge,
        ..config.clone()
    };
    let fit = earl_fit(data, &weights, &config)?;
    let mut out = BaselineFit::new(BaselineMethod::Owl, fit.rule);
    out.objective_value = Some(fit.objective_value);
    out.outcome_shift = shift;
    Ok(out)
}

/// `P_n[ Y / pi(A; X) phi(A f(X)) ] + lambda |beta|^2` with the hinge
/// `phi`, written out directly.
pub fn owl_objective(
    rule: &LinearRule,
    data: &Dataset,
    propensity: &dyn PropensityScore,
    lambda: f64,
) -> Result<f64> {
    if data.p() != rule.p() {
        return Err(EarlError::shape(format!(
            "dataset has p = {}, rule expects {}",
            data.p(),
            rule.p()
        )));
    }
    let n = data.n();
    let mut risk = 0.0;
    for i in 0..n {
        let x = data.row(i);
        let a = data.treatment(i);
        let f = rule.decision_value_unchecked(x);
        let w = data.outcome(i) / propensity.prob(x, a);
        let (on_pos, on_neg) = match a {
            Treatment::Pos => (w, 0.0),
            Treatment::Neg => (0.0, w),
        };
        if on_pos != 0.0 {
            risk += on_pos * SurrogateLoss::Hinge.value(f);
        }
        if on_neg != 0.0 {
            risk += on_neg * SurrogateLoss::Hinge.value(-f);
        }
    }
    Ok(risk / n as f64 + lambda * rule.beta.iter().map(|b| b * b).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_sd: f64,
    pub tournament: usize,
    pub seed: u64,
    pub rule_features: FeatureSpec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 100,
            generations: 200,
            mutation_sd: 0.1,
            tournament: 4,
            seed: 0,
            rule_features: FeatureSpec::new("linear"),
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.population < 10 {
            return Err(EarlError::config(format!("population must be >= 10, got {}", self.population)));
        }
        if self.generations == 0 {
            return Err(EarlError::config("generations must be >= 1"));
        }
        if self.tournament == 0 {
            return Err(EarlError::config("tournament size must be >= 1"));
        }
        if !(self.mutation_sd >= 0.0 && self.mutation_sd.is_finite()) {
            return Err(EarlError::config(format!("invalid mutation s.d. {}", self.mutation_sd)));
        }
        Ok(())
    }
}

/// Per-subject augmented contributions for each recommendation, so a rule's
/// value is an average of table lookups.
struct Fitness {
    h: Vec<f64>,
    q: usize,
    gain_pos: Vec<f64>,
    gain_neg: Vec<f64>,
}

impl Fitness {
    fn scores(&self, params: &[f64]) -> Vec<f64> {
        self.h
            .chunks_exact(self.q.max(1))
            .take(self.gain_pos.len())
            .map(|row| params[0] + dot(&row[..self.q], &params[1..]))
            .collect()
    }

    fn value(&self, params: &[f64]) -> f64 {
        let f = self.scores(params);
        let sum: f64 = f
            .iter()
            .enumerate()
            .map(|(i, &fi)| if fi >= 0.0 { self.gain_pos[i] } else { self.gain_neg[i] })
            .sum();
        sum / f.len() as f64
    }

    /// Best intercept for the current slope: the value is piecewise constant
    /// in the intercept, so every threshold between sorted scores is tried.
    fn refine_intercept(&self, params: &mut [f64], current: f64) -> f64 {
        let mut slopes = params.to_vec();
        slopes[0] = 0.0;
        let s = self.scores(&slopes);
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        // Intercept b recommends +1 to subject i iff b >= -s_i. Walk b
        // upward from below every threshold.
        let mut gain = 0.0;
        let (mut best_gain, mut best_k) = (0.0, 0);
        for (k, &i) in order.iter().enumerate() {
            gain += self.gain_pos[i] - self.gain_neg[i];
            let boundary = k + 1 == order.len() || s[order[k + 1]] != s[i];
            if boundary && gain > best_gain {
                best_gain = gain;
                best_k = k + 1;
            }
        }
        let t = |k: usize| -s[order[k]];
        let b = match best_k {
            0 => t(0) - 1.0,
            k if k == order.len() => t(k - 1) + 1.0,
            k => 0.5 * (t(k - 1) + t(k)),
        };
        let old = params[0];
        params[0] = b;
        let v = self.value(params);
        if v >= current {
            v
        } else {
            params[0] = old;
            current
        }
    }
}

/// Scales so the slope part has unit norm; the rule is unchanged.
fn normalize(params: &mut [f64]) {
    let r = norm(&params[1..]);
    if r > 0.0 && r.is_finite() {
        params.iter_mut().for_each(|v| *v /= r);
    }
}

/// Coefficients of `rule` on `map`, dropping terms the map lacks.
fn project_rule(rule: &LinearRule, map: &FeatureMap) -> Vec<f64> {
    let mut params = vec![0.0; map.len() + 1];
    params[0] = rule.beta0;
    for (t, b) in rule.features().terms().iter().zip(&rule.beta) {
        if let Some(k) = map.position(Term { basis: t.basis, crossed: false }) {
            params[k + 1] = *b;
        }
    }
    params
}

/// Evolutionary search for the linear rule maximizing the augmented value
/// estimate. The population starts from random unit directions plus the
/// Q-learning rule of `outcome` (or `seed_rule` when given); selection is by
/// tournament with elitism, offspring come from uniform crossover and
/// Gaussian mutation. The elite's intercept is re-optimized exactly each
/// generation.
pub fn aipwe_direct_search(
    data: &Dataset,
    propensity: &dyn PropensityScore,
    outcome: &dyn OutcomeRegression,
    seed_rule: Option<&LinearRule>,
    config: &SearchConfig,
) -> Result<BaselineFit> {
    config.validate()?;
    let map = config.rule_features.resolve(data.p())?.without_intercept();
    if map.has_treatment_terms() {
        return Err(EarlError::config("rule features cannot involve the treatment"));
    }
    let n = data.n();
    let mut gain_pos = Vec::with_capacity(n);
    let mut gain_neg = Vec::with_capacity(n);
    for i in 0..n {
        let (x, a, y) = (data.row(i), data.treatment(i), data.outcome(i));
        gain_pos.push(aipwe_term(y, a, Treatment::Pos, x, propensity, outcome));
        gain_neg.push(aipwe_term(y, a, Treatment::Neg, x, propensity, outcome));
    }
    let fitness = Fitness {
        h: map.design(data, None)?,
        q: map.len(),
        gain_pos,
        gain_neg,
    };
    let d = map.len() + 1;
    let mut rng = stream_rng(config.seed, stream_key(&[0x6a, n as u64]));

    let mut population: Vec<Vec<f64>> = Vec::with_capacity(config.population);
    if let Some(r) = seed_rule {
        let mut s = project_rule(r, &map);
        normalize(&mut s);
        population.push(s);
    }
    while population.len() < config.population {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        population.push(v);
    }

    let evaluate = |pop: &[Vec<f64>]| -> Vec<f64> { pop.par_iter().map(|p| fitness.value(p)).collect() };
    let mut scores = evaluate(&population);
    let mut trace = Vec::with_capacity(config.generations);
    let argmax = |s: &[f64]| {
        (0..s.len()).fold(0, |b, i| if s[i] > s[b] || (s[b].is_nan() && !s[i].is_nan()) { i } else { b })
    };

    for _ in 0..config.generations {
        let e = argmax(&scores);
        let mut elite = population[e].clone();
        let elite_score = fitness.refine_intercept(&mut elite, scores[e]);
        let mut next = Vec::with_capacity(config.population);
        next.push(elite);
        let tournament = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut best = rng.random_range(0..population.len());
            for _ in 1..config.tournament {
                let c = rng.random_range(0..population.len());
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best
        };
        while next.len() < config.population {
            let (pa, pb) = (tournament(&mut rng), tournament(&mut rng));
            let mut child: Vec<f64> = (0..d)
                .map(|k| if rng.random::<bool>() { population[pa][k] } else { population[pb][k] })
                .collect();
            for c in child.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c += config.mutation_sd * z;
            }
            normalize(&mut child);
            next.push(child);
        }
        population = next;
        let mut fresh = evaluate(&population[1..]);
        fresh.insert(0, elite_score);
        scores = fresh;
        trace.push(scores[argmax(&scores)]);
    }

    let b = argmax(&scores);
    let mut out = BaselineFit::new(
        BaselineMethod::AipweDirect,
        LinearRule::from_params(&population[b], map),
    );
    out.fitness_trace = trace;
    Ok(out)
}

#[cfg(test)]
mod tests;
