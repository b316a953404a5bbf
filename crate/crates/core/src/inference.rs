//! Permutation test for individual rule coefficients.
//!
//! Covariate `j` is permuted across subjects and the whole fitting pipeline
//! is rerun. The statistic is `|beta_j|` and the p-value is
//! `(1 + #{b : |beta_j^(b)| >= |beta_j|}) / (B + 1)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{EarlError, Result};
use crate::features::Basis;
use crate::rng::{stream_key, stream_rng};
use crate::rule::LinearRule;

/// Default number of permutations.
pub const DEFAULT_PERMUTATIONS: usize = 2000;

/// Refits are allowed to fail in at most this fraction of permutations.
const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationEntry {
    pub covariate: String,
    /// Zero-based column index.
    pub index: usize,
    pub coefficient: f64,
    pub p_value: f64,
    /// Permutations whose refit succeeded.
    pub permutations: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub permutations: usize,
    pub entries: Vec<PermutationEntry>,
}

fn statistic(rule: &LinearRule, j: usize) -> Result<f64> {
    rule.coefficient_of(Basis::Coord(j))
        .map(f64::abs)
        .ok_or_else(|| EarlError::config(format!("the fitted rule has no term for x{}", j + 1)))
}

/// Tests covariate `j` (zero-based) with `b` permutations. `pipeline` must be
/// deterministic given its input.
pub fn permutation_test<F>(data: &Dataset, pipeline: F, j: usize, b: usize, seed: u64) -> Result<PermutationEntry>
where
    F: Fn(&Dataset) -> Result<LinearRule> + Sync,
{
    if b == 0 {
        return Err(EarlError::config("the number of permutations must be >= 1"));
    }
    if j >= data.p() {
        return Err(EarlError::shape(format!("covariate index {j} out of range for p = {}", data.p())));
    }
    let observed = pipeline(data)?;
    let coefficient = observed
        .coefficient_of(Basis::Coord(j))
        .ok_or_else(|| EarlError::config(format!("the fitted rule has no term for x{}", j + 1)))?;
    let stat = coefficient.abs();

    let permuted: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut order: Vec<usize> = (0..data.n()).collect();
            order.shuffle(&mut stream_rng(seed, stream_key(&[j as u64, k as u64])));
            let d = data.with_column_permuted(j, &order).ok()?;
            match pipeline(&d).and_then(|r| statistic(&r, j)) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::debug!("permutation {k} of x{}: refit failed: {e}", j + 1);
                    None
                }
            }
        })
        .collect();
    let failures = permuted.iter().filter(|s| s.is_none()).count();
    if failures as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(EarlError::NonConvergence(format!(
            "{failures} of {b} permutation refits failed for x{}",
            j + 1
        )));
    }
    let ok = b - failures;
    let exceed = permuted.iter().flatten().filter(|&&s| s >= stat).count();
    Ok(PermutationEntry {
        covariate: format!("x{}", j + 1),
        index: j,
        coefficient,
        p_value: (1 + exceed) as f64 / (ok + 1) as f64,
        permutations: ok,
        failures,
    })
}

/// Runs [`permutation_test`] for each covariate in `covariates`.
pub fn permutation_report<F>(
    data: &Dataset,
    pipeline: F,
    covariates: &[usize],
    b: usize,
    seed: u64,
) -> Result<PermutationReport>
where
    F: Fn(&Dataset) -> Result<LinearRule> + Sync,
{
    let entries = covariates
        .iter()
        .map(|&j| permutation_test(data, &pipeline, j, b, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PermutationReport { permutations: b, entries })
}

impl PermutationReport {
    /// Table of `covariate,coefficient,p_value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| EarlError::Io(std::io::Error::other(e));
        w.write_record(["covariate", "coefficient", "p_value"]).map_err(io)?;
        for e in &self.entries {
            w.write_record([e.covariate.clone(), e.coefficient.to_string(), e.p_value.to_string()])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Treatment;
    use crate::features::FeatureMap;

    fn tiny() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let a = (0..12)
            .map(|i| if i % 3 == 0 { Treatment::Pos } else { Treatment::Neg })
            .collect();
        Dataset::from_rows(&rows, a, (0..12).map(|i| i as f64).collect()).unwrap()
    }

    fn constant_pipeline(d: &Dataset) -> Result<LinearRule> {
        LinearRule::new(0.0, vec![0.5, -0.5], FeatureMap::parse("x1,x2", d.p()).unwrap())
    }

    #[test]
    fn constant_statistic_gives_p_one() {
        let e = permutation_test(&tiny(), constant_pipeline, 0, 30, 1).unwrap();
        assert_eq!(e.p_value, 1.0);
        assert_eq!(e.permutations, 30);
    }

    #[test]
    fn p_value_bounds_and_determinism() {
        let pipeline = |d: &Dataset| {
            let s: f64 = (0..d.n()).map(|i| d.row(i)[1] * d.outcome(i)).sum();
            LinearRule::new(0.0, vec![1.0, s], FeatureMap::parse("x1,x2", d.p()).unwrap())
        };
        let a = permutation_test(&tiny(), pipeline, 1, 40, 9).unwrap();
        let b = permutation_test(&tiny(), pipeline, 1, 40, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value >= 1.0 / 41.0 && a.p_value <= 1.0);
    }

    #[test]
    fn failures_beyond_budget_are_errors() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let flaky = |d: &Dataset| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                constant_pipeline(d)
            } else {
                Err(EarlError::numerical("boom"))
            }
        };
        assert!(matches!(
            permutation_test(&tiny(), flaky, 0, 20, 1),
            Err(EarlError::NonConvergence(_))
        ));
    }

    #[test]
    fn missing_term_and_bad_arguments() {
        let only_x2 = |d: &Dataset| LinearRule::new(0.0, vec![1.0], FeatureMap::parse("x2", d.p()).unwrap());
        assert!(permutation_test(&tiny(), only_x2, 0, 5, 1).is_err());
        assert!(permutation_test(&tiny(), constant_pipeline, 0, 0, 1).is_err());
        assert!(permutation_test(&tiny(), constant_pipeline, 5, 3, 1).is_err());
    }

    #[test]
    fn report_table() {
        let r = permutation_report(&tiny(), constant_pipeline, &[0, 1], 5, 2).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("covariate,coefficient,p_value\nx1,0.5,1\nx2,-0.5,1\n"));
    }
}
