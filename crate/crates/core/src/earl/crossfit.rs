//! K-fold cross-fitting: nuisance models are fit on fold `I_k`, the rule on
//! the remaining subjects `I_(-k)`, and the fold rules are averaged.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{earl_fit, earl_objective, EarlConfig, EarlFit, SolverDiagnostics};
use crate::data::Dataset;
use crate::error::{EarlError, Result};
use crate::nuisance::{fit_nuisance, FittedNuisance, NuisanceSpec};
use crate::rng::{stream_key, stream_rng};
use crate::rule::LinearRule;
use crate::weights::{compute_all_weights, WeightPair};

const PARTITION_STREAM: u64 = 0x70a7;

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(EarlError::shape(format!("cannot split {n} subjects into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, stream_key(&[PARTITION_STREAM, k as u64])));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug)]
pub struct CrossFitFold {
    /// `I_k`, where the nuisance models were fit.
    pub nuisance_indices: Vec<usize>,
    /// `I_(-k)`, where the rule was fit.
    pub erm_indices: Vec<usize>,
    pub nuisance: FittedNuisance,
    pub weights: Vec<WeightPair>,
    pub fit: EarlFit,
}

#[derive(Clone, Debug)]
pub struct CrossFit {
    /// The aggregated rule; `per_fold_rules` is populated.
    pub fit: EarlFit,
    pub folds: Vec<CrossFitFold>,
    pub warnings: Vec<String>,
}

/// Cross-fitting over a seeded random partition into `config.folds` folds.
pub fn earl_fit_crossfit(data: &Dataset, spec: &NuisanceSpec, config: &EarlConfig) -> Result<CrossFit> {
    config.validate()?;
    if data.n() < 2 * config.folds {
        return Err(EarlError::shape(format!(
            "cross-fitting with K = {} needs n >= {}, got {}",
            config.folds,
            2 * config.folds,
            data.n()
        )));
    }
    let folds = partition(data.n(), config.folds, config.seed)?;
    earl_fit_crossfit_with_folds(data, spec, config, folds)
}

/// Cross-fitting over caller-supplied disjoint folds.
pub fn earl_fit_crossfit_with_folds(
    data: &Dataset,
    spec: &NuisanceSpec,
    config: &EarlConfig,
    folds: Vec<Vec<usize>>,
) -> Result<CrossFit> {
    config.validate()?;
    let (folds, warnings) = merge_single_arm_folds(data, folds)?;
    let n = data.n();
    let fitted: Vec<CrossFitFold> = folds
        .par_iter()
        .map(|fold| {
            let mut in_fold = vec![false; n];
            for &i in fold {
                in_fold[i] = true;
            }
            let erm_indices: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
            let nuisance = fit_nuisance(&data.subset(fold), spec)?;
            let erm = data.subset(&erm_indices);
            let weights = compute_all_weights(&erm, &nuisance, &nuisance)?;
            let fit = earl_fit(&erm, &weights, config)?;
            Ok(CrossFitFold {
                nuisance_indices: fold.clone(),
                erm_indices,
                nuisance,
                weights,
                fit,
            })
        })
        .collect::<Result<_>>()?;

    let k = fitted.len() as f64;
    let map = fitted[0].fit.rule.features().clone();
    let mut params = vec![0.0; map.len() + 1];
    for fold in &fitted {
        params[0] += fold.fit.rule.beta0;
        for (p, b) in params[1..].iter_mut().zip(&fold.fit.rule.beta) {
            *p += b;
        }
    }
    params.iter_mut().for_each(|p| *p /= k);
    let rule = LinearRule::from_params(&params, map);

    let mut objective = 0.0;
    for fold in &fitted {
        let erm = data.subset(&fold.erm_indices);
        objective += earl_objective(&rule, &fold.weights, &erm, config.loss, config.lambda)?;
    }
    let diagnostics = SolverDiagnostics {
        iterations: fitted.iter().map(|f| f.fit.diagnostics.iterations).sum(),
        gradient_norm: fitted.iter().map(|f| f.fit.diagnostics.gradient_norm).fold(0.0, f64::max),
        converged: fitted.iter().all(|f| f.fit.diagnostics.converged),
    };
    let fit = EarlFit {
        rule,
        objective_value: objective / k,
        lambda_used: config.lambda,
        per_fold_rules: Some(fitted.iter().map(|f| f.fit.rule.clone()).collect()),
        diagnostics,
    };
    Ok(CrossFit { fit, folds: fitted, warnings })
}

/// Folds whose subjects all share one treatment cannot support a propensity
/// fit; each is merged into its neighbour.
fn merge_single_arm_folds(data: &Dataset, mut folds: Vec<Vec<usize>>) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    let mut seen = vec![false; data.n()];
    for &i in folds.iter().flatten() {
        if i >= data.n() || std::mem::replace(&mut seen[i], true) {
            return Err(EarlError::shape(format!("fold index {i} is out of range or repeated")));
        }
    }
    let mut warnings = Vec::new();
    loop {
        if folds.len() < 2 {
            return Err(EarlError::shape("cross-fitting needs at least two folds"));
        }
        let single = folds.iter().position(|f| {
            let first = f.first().map(|&i| data.treatment(i));
            f.iter().all(|&i| Some(data.treatment(i)) == first)
        });
        let Some(k) = single else { break };
        if folds.len() == 2 {
            return Err(EarlError::Unsupported(format!(
                "fold {} contains a single treatment arm and K = 2 leaves nothing to merge with",
                k + 1
            )));
        }
        let other = if k + 1 < folds.len() { k + 1 } else { k - 1 };
        let moved = folds.remove(k);
        let target = if other > k { other - 1 } else { other };
        folds[target].extend(moved);
        folds[target].sort_unstable();
        let msg = format!("fold {} had a single treatment arm and was merged into a neighbour", k + 1);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok((folds, warnings))
}
