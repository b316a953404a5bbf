//! Regularized weighted surrogate-risk minimization over linear rules.
//!
//! Given per-subject weight pairs `(W_1, W_{-1})`, the estimator minimizes
//!
//! ```text
//! P_n[ |W_1| phi(sgn(W_1) f(X)) + |W_{-1}| phi(-sgn(W_{-1}) f(X)) ] + lambda |beta|^2
//! ```
//!
//! over `f(x) = beta0 + beta . h(x)`. The intercept is not penalized.

mod crossfit;
mod cv;
mod solver;

use serde::{Deserialize, Serialize};

pub use crossfit::{earl_fit_crossfit, earl_fit_crossfit_with_folds, partition, CrossFit, CrossFitFold};
pub use cv::{select_lambda, CvRow, LambdaSelection};

use crate::data::Dataset;
use crate::error::{EarlError, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::loss::SurrogateLoss;
use crate::nuisance::{fit_nuisance, FittedNuisance, NuisanceSpec};
use crate::rule::LinearRule;
use crate::weights::{compute_all_weights, WeightPair};

pub(crate) use solver::Problem;

/// `2^-5, 2^-4, ..., 2^5`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-5..=5).map(|k| 2f64.powi(k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlConfig {
    pub loss: SurrogateLoss,
    pub lambda: f64,
    /// Basis `h(x)` of the decision function; an intercept is always added.
    pub rule_features: FeatureSpec,
    /// Gradient-norm stopping tolerance for the smooth losses.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Iteration budget of the hinge-loss subgradient method.
    pub subgradient_iterations: usize,
    /// Cross-fitting fold count `K`.
    pub folds: usize,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for EarlConfig {
    fn default() -> Self {
        EarlConfig {
            loss: SurrogateLoss::Logistic,
            lambda: 1.0,
            rule_features: FeatureSpec::new("linear"),
            tolerance: 1e-8,
            max_iterations: 5000,
            subgradient_iterations: 20_000,
            folds: 2,
            cv_folds: 10,
            lambda_grid: default_lambda_grid(),
            seed: 0,
        }
    }
}

impl EarlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EarlError::config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.folds < 2 {
            return bad(format!("cross-fitting needs at least 2 folds, got {}", self.folds));
        }
        if self.cv_folds < 2 {
            return bad(format!("cross-validation needs at least 2 folds, got {}", self.cv_folds));
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda grid is empty".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda grid entries must be finite and >= 0, got {l}"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iterations == 0 || self.subgradient_iterations == 0 {
            return bad("iteration limits must be positive".into());
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        EarlConfig { lambda, ..self.clone() }
    }

    /// The rule basis resolved for `p` covariates, intercept stripped.
    pub fn rule_map(&self, p: usize) -> Result<FeatureMap> {
        let map = self.rule_features.resolve(p)?.without_intercept();
        if map.has_treatment_terms() {
            return Err(EarlError::config(format!(
                "rule features cannot involve the treatment, got `{}`",
                self.rule_features
            )));
        }
        Ok(map)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Norm of the gradient (a subgradient for the hinge) at the returned
    /// coefficients.
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct EarlFit {
    pub rule: LinearRule,
    pub objective_value: f64,
    pub lambda_used: f64,
    pub per_fold_rules: Option<Vec<LinearRule>>,
    pub diagnostics: SolverDiagnostics,
}

/// The penalized objective at `rule`.
pub fn earl_objective(
    rule: &LinearRule,
    weights: &[WeightPair],
    data: &Dataset,
    loss: SurrogateLoss,
    lambda: f64,
) -> Result<f64> {
    let problem = Problem::new(data, weights, rule.features(), loss, lambda)?;
    Ok(problem.value(&rule.params()))
}

/// Gradient of [`earl_objective`] in `[beta0, beta...]` order; for the hinge,
/// the subgradient using derivative 0 at the kink.
pub fn earl_gradient(
    rule: &LinearRule,
    weights: &[WeightPair],
    data: &Dataset,
    loss: SurrogateLoss,
    lambda: f64,
) -> Result<Vec<f64>> {
    let problem = Problem::new(data, weights, rule.features(), loss, lambda)?;
    Ok(problem.gradient(&rule.params()))
}

/// Solves the penalized problem from `beta = 0`.
pub fn earl_fit(data: &Dataset, weights: &[WeightPair], config: &EarlConfig) -> Result<EarlFit> {
    earl_fit_from(data, weights, config, None)
}

/// As [`earl_fit`], starting the solver from `init` when given. The result is
/// still never worse than `beta = 0`.
pub fn earl_fit_from(
    data: &Dataset,
    weights: &[WeightPair],
    config: &EarlConfig,
    init: Option<&LinearRule>,
) -> Result<EarlFit> {
    config.validate()?;
    let map = config.rule_map(data.p())?;
    let problem = Problem::new(data, weights, &map, config.loss, config.lambda)?;
    let start = match init {
        Some(r) if r.features() == &map => r.params(),
        Some(_) => return Err(EarlError::config("warm start uses a different rule basis")),
        None => vec![0.0; map.len() + 1],
    };
    let (params, diagnostics) = if config.loss.is_smooth() {
        solver::newton(&problem, start, config.tolerance, config.max_iterations)?
    } else {
        solver::subgradient(&problem, start, config.subgradient_iterations)?
    };
    let objective_value = problem.value(&params);
    Ok(EarlFit {
        rule: LinearRule::from_params(&params, map),
        objective_value,
        lambda_used: config.lambda,
        per_fold_rules: None,
        diagnostics,
    })
}

/// A full-sample fit together with the nuisance models behind its weights.
#[derive(Clone, Debug)]
pub struct PipelineFit {
    pub fit: EarlFit,
    pub nuisance: FittedNuisance,
    pub selection: Option<LambdaSelection>,
}

/// Fits the nuisance models on all of `data`, optionally chooses `lambda`
/// by cross-validation, and solves for the rule.
pub fn fit_pipeline(
    data: &Dataset,
    spec: &NuisanceSpec,
    config: &EarlConfig,
    choose_lambda: bool,
) -> Result<PipelineFit> {
    config.validate()?;
    let selection = if choose_lambda {
        Some(select_lambda(data, spec, config)?)
    } else {
        None
    };
    let lambda = selection.as_ref().map_or(config.lambda, |s| s.lambda);
    let nuisance = fit_nuisance(data, spec)?;
    let weights = compute_all_weights(data, &nuisance, &nuisance)?;
    let fit = earl_fit(data, &weights, &config.with_lambda(lambda))?;
    Ok(PipelineFit { fit, nuisance, selection })
}
