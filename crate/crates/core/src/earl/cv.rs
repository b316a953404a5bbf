//! Choosing `lambda` by cross-validated augmented value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{earl_fit_from, partition, EarlConfig};
use crate::data::Dataset;
use crate::error::{EarlError, Result};
use crate::nuisance::{fit_nuisance, FittedNuisance, NuisanceSpec};
use crate::rule::LinearRule;
use crate::value::value_aipwe;
use crate::weights::compute_all_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub lambda: f64,
    /// Mean held-out value; NaN when any fold failed.
    pub mean_value: f64,
    pub fold_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub table: Vec<CvRow>,
}

/// For each `lambda` in the grid, fits on the training folds and scores the
/// rule on the held-out fold with the augmented estimator, using nuisance
/// models refit on that fold. Picks the largest mean held-out value, ties
/// going to the larger `lambda`.
pub fn select_lambda(data: &Dataset, spec: &NuisanceSpec, config: &EarlConfig) -> Result<LambdaSelection> {
    config.validate()?;
    let k = config.cv_folds;
    if data.n() < k {
        return Err(EarlError::shape(format!(
            "{k}-fold cross-validation needs n >= {k}, got {}",
            data.n()
        )));
    }
    let folds = partition(data.n(), k, config.seed ^ 0xc5)?;
    // Visit the grid from the largest lambda down so each fit warm-starts
    // from a more regularized solution.
    let mut order: Vec<usize> = (0..config.lambda_grid.len()).collect();
    order.sort_by(|&a, &b| config.lambda_grid[b].total_cmp(&config.lambda_grid[a]));

    let full: std::sync::OnceLock<Option<FittedNuisance>> = std::sync::OnceLock::new();
    let per_fold: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|held| {
            let mut nan = vec![f64::NAN; config.lambda_grid.len()];
            let mut in_held = vec![false; data.n()];
            for &i in held {
                in_held[i] = true;
            }
            let train_idx: Vec<usize> = (0..data.n()).filter(|&i| !in_held[i]).collect();
            let train = data.subset(&train_idx);
            let test = data.subset(held);
            let Ok(train_nuis) = fit_nuisance(&train, spec) else {
                log::warn!("cross-validation: nuisance fit failed on a training split");
                return nan;
            };
            let test_nuis = match fit_nuisance(&test, spec) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("cross-validation: held-out nuisance refit failed ({e}); using full-sample models");
                    match full.get_or_init(|| fit_nuisance(data, spec).ok()) {
                        Some(m) => m.clone(),
                        None => return nan,
                    }
                }
            };
            let Ok(weights) = compute_all_weights(&train, &train_nuis, &train_nuis) else {
                return nan;
            };
            let mut warm: Option<LinearRule> = None;
            for &j in &order {
                let cfg = config.with_lambda(config.lambda_grid[j]);
                match earl_fit_from(&train, &weights, &cfg, warm.as_ref()) {
                    Ok(fit) => {
                        if let Ok(v) = value_aipwe(&test, &fit.rule, &test_nuis, &test_nuis) {
                            nan[j] = v.estimate;
                        }
                        warm = Some(fit.rule);
                    }
                    Err(e) => log::warn!("cross-validation fit failed at lambda {}: {e}", cfg.lambda),
                }
            }
            nan
        })
        .collect();
    choose(&config.lambda_grid, &per_fold)
}

/// Builds the table and applies the selection rule.
pub(crate) fn choose(grid: &[f64], per_fold: &[Vec<f64>]) -> Result<LambdaSelection> {
    let table: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(j, &lambda)| {
            let fold_values: Vec<f64> = per_fold.iter().map(|v| v[j]).collect();
            let mean_value = fold_values.iter().sum::<f64>() / fold_values.len() as f64;
            CvRow { lambda, mean_value, fold_values }
        })
        .collect();
    let mut best: Option<&CvRow> = None;
    for row in table.iter().filter(|r| r.mean_value.is_finite()) {
        best = match best {
            None => Some(row),
            Some(b) if row.mean_value > b.mean_value => Some(row),
            Some(b) if row.mean_value == b.mean_value && row.lambda > b.lambda => Some(row),
            keep => keep,
        };
    }
    let lambda = best
        .ok_or_else(|| EarlError::numerical("every cross-validated value is non-finite"))?
        .lambda;
    Ok(LambdaSelection { lambda, table })
}
