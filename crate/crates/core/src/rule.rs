use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Treatment};
use crate::error::{EarlError, Result};
use crate::features::{Basis, FeatureMap, FeatureSpec, Term};

/// `f(x) = beta0 + beta . features(x)` and the rule `d(x) = sgn f(x)`.
///
/// The feature map is over `x` only and carries no intercept term.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRule {
    pub beta0: f64,
    pub beta: Vec<f64>,
    features: FeatureMap,
}

impl LinearRule {
    pub fn new(beta0: f64, beta: Vec<f64>, features: FeatureMap) -> Result<Self> {
        if features.has_treatment_terms() || features.has_intercept() {
            return Err(EarlError::config(format!(
                "rule features must be functions of x without intercept, got `{features}`"
            )));
        }
        if beta.len() != features.len() {
            return Err(EarlError::shape(format!(
                "{} coefficients for {} rule features",
                beta.len(),
                features.len()
            )));
        }
        Ok(LinearRule { beta0, beta, features })
    }

    /// All-zero rule over `features` (recommends +1 everywhere).
    pub fn zero(features: FeatureMap) -> Self {
        let q = features.len();
        LinearRule { beta0: 0.0, beta: vec![0.0; q], features }
    }

    /// Builds from a flat `[beta0, beta...]` vector.
    pub(crate) fn from_params(params: &[f64], features: FeatureMap) -> Self {
        LinearRule {
            beta0: params[0],
            beta: params[1..].to_vec(),
            features,
        }
    }

    pub(crate) fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + 1);
        v.push(self.beta0);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn p(&self) -> usize {
        self.features.p()
    }

    /// Coefficient on the plain covariate `x_{j+1}`, if that term is present.
    pub fn coefficient_of(&self, basis: Basis) -> Option<f64> {
        self.features
            .position(Term { basis, crossed: false })
            .map(|k| self.beta[k])
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        self.features.check_dim(x)?;
        Ok(self.decision_value_unchecked(x))
    }

    #[inline]
    pub(crate) fn decision_value_unchecked(&self, x: &[f64]) -> f64 {
        self.beta0
            + self
                .features
                .terms()
                .iter()
                .zip(&self.beta)
                .map(|(t, b)| b * t.basis.eval(x))
                .sum::<f64>()
    }

    /// `d(x)`: +1 when `f(x) >= 0`, else -1.
    pub fn apply(&self, x: &[f64]) -> Result<Treatment> {
        Ok(Treatment::from_sign(self.decision_value(x)?))
    }

    /// Recommendations for every subject in `data`.
    pub fn decisions(&self, data: &Dataset) -> Result<Vec<Treatment>> {
        if data.p() != self.p() {
            return Err(EarlError::shape(format!(
                "dataset has p = {}, rule expects {}",
                data.p(),
                self.p()
            )));
        }
        Ok((0..data.n())
            .map(|i| Treatment::from_sign(self.decision_value_unchecked(data.row(i))))
            .collect())
    }

    pub fn to_record(&self) -> RuleRecord {
        RuleRecord {
            features: FeatureSpec::new(self.features.to_string()),
            beta0: self.beta0,
            beta: self.beta.clone(),
        }
    }

    pub fn from_record(rec: &RuleRecord, p: usize) -> Result<Self> {
        LinearRule::new(rec.beta0, rec.beta.clone(), rec.features.resolve(p)?)
    }
}

/// Serializable form of a [`LinearRule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleRecord {
    pub features: FeatureSpec,
    pub beta0: f64,
    pub beta: Vec<f64>,
}
