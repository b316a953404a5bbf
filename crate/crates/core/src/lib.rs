//! Doubly-robust learning of individualized treatment rules.
//!
//! A rule recommends treatment `+1` or `-1` from covariates `x`. Its value is
//! estimated by the augmented inverse-probability-weighted estimator, which
//! stays consistent when either the propensity model or the outcome model is
//! right. Maximizing that estimate over linear rules is a weighted
//! classification problem; replacing the 0-1 loss by a convex surrogate and
//! adding a ridge penalty gives a tractable estimator, fit here either on the
//! full sample or by K-fold cross-fitting.
//!
//! ```no_run
//! use earl_core::{fit_pipeline, EarlConfig, NuisanceSpec, Scenario, ScenarioSpec, generate_scenario};
//!
//! let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 500), 1);
//! let fit = fit_pipeline(&data, &NuisanceSpec::default(), &EarlConfig::default(), true).unwrap();
//! println!("{:?}", fit.fit.rule);
//! ```

pub mod baselines;
pub mod data;
pub mod earl;
pub mod error;
pub mod features;
pub mod inference;
mod linalg;
pub mod loss;
pub mod nuisance;
pub mod rng;
pub mod rule;
pub mod sim;
pub mod value;
pub mod weights;

pub use baselines::{aipwe_direct_search, owl_fit, owl_objective, qlearning_fit, BaselineFit, BaselineMethod, SearchConfig};
pub use data::{load_csv, read_csv, save_csv, sgn, write_csv, Dataset, PerArm, Treatment};
pub use earl::{
    default_lambda_grid, earl_fit, earl_fit_crossfit, earl_gradient, earl_fit_crossfit_with_folds, earl_fit_from, earl_objective,
    fit_pipeline, partition, select_lambda, CrossFit, CrossFitFold, CvRow, EarlConfig, EarlFit, LambdaSelection,
    PipelineFit, SolverDiagnostics,
};
pub use error::{EarlError, Result};
pub use features::{Basis, FeatureMap, FeatureSpec, Term};
pub use inference::{permutation_report, permutation_test, PermutationEntry, PermutationReport};
pub use loss::SurrogateLoss;
pub use nuisance::{
    fit_nuisance, fit_outcome, fit_propensity, Clip, FittedNuisance, NuisanceSpec, OutcomeModel, OutcomeRegression,
    PropensityModel, PropensityScore, ZeroOutcome,
};
pub use rule::{LinearRule, RuleRecord};
pub use sim::{
    generate_scenario, optimal_rule, run_experiment, true_value_mc, true_value_mc_with_se, write_results_csv,
    ExperimentConfig, ExperimentResult, Method, ModelSpec, Scenario, ScenarioSpec, TrueOutcome, TruePropensity,
    ValidationSet,
};
pub use value::{
    aggregate_fold_values, aipwe_for_decisions, ipwe_for_decisions, ipwe_normalized_for_decisions, value_aipwe,
    value_crossfit_aggregate, value_ipwe, value_ipwe_normalized, EstimatorKind, ValueEstimate,
};
pub use weights::{classification_view, compute_all_weights, compute_weights, weighted_misclassification, ClassificationInstance, WeightPair};
