//! Simulation scenarios, the nuisance-specification grid, and a replicate
//! runner that scores fitted rules against the true value.
//!
//! Covariates are ten independent standard normals. Treatment is drawn from
//! `P(A = 1 | x) = expit(l(x))`, and
//!
//! ```text
//! Y = sum_j x_j^2 + sum_j x_j + A c(x) + e,   c(x) = x1 + x2 - 0.1,   e ~ N(0, 1).
//! ```

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{aipwe_direct_search, owl_fit, qlearning_fit, SearchConfig};
use crate::data::{Dataset, Treatment};
use crate::earl::{earl_fit, select_lambda, EarlConfig};
use crate::error::{EarlError, Result};
use crate::features::FeatureSpec;
use crate::loss::SurrogateLoss;
use crate::nuisance::{fit_nuisance, expit, NuisanceSpec, OutcomeRegression, PropensityScore};
use crate::rng::{stream_key, stream_rng};
use crate::rule::LinearRule;
use crate::weights::compute_all_weights;

/// Covariate dimension of every scenario.
pub const P: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// `l(x) = x1 + x2 + x1 x2`
    One,
    /// `l(x) = 0.5 x1 - 0.5`
    Two,
    /// `P(A = 1 | x) = 0.025`
    Three,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::One, Scenario::Two, Scenario::Three];

    pub fn number(self) -> u8 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }

    pub fn prob_treated(self, x: &[f64]) -> f64 {
        match self {
            Scenario::One => expit(x[0] + x[1] + x[0] * x[1]),
            Scenario::Two => expit(0.5 * x[0] - 0.5),
            Scenario::Three => 0.025,
        }
    }

    /// Treatment-free part of the mean outcome.
    pub fn main_effect(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v + v).sum()
    }

    /// `c(x) = x1 + x2 - 0.1`; the optimal rule is `sgn c(x)`.
    pub fn contrast(x: &[f64]) -> f64 {
        x[0] + x[1] - 0.1
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Scenario {
    type Error = EarlError;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            _ => Err(EarlError::config(format!("scenario must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Scenario {
    type Err = EarlError;
    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u8>()
            .map_err(|_| EarlError::config(format!("scenario must be 1, 2 or 3, got `{s}`")))?
            .try_into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize) -> Self {
        ScenarioSpec { scenario, n }
    }
}

/// The generating propensity score.
#[derive(Clone, Copy, Debug)]
pub struct TruePropensity {
    pub scenario: Scenario,
}

impl TruePropensity {
    pub fn new(scenario: Scenario) -> Self {
        TruePropensity { scenario }
    }
}

impl PropensityScore for TruePropensity {
    fn prob(&self, x: &[f64], a: Treatment) -> f64 {
        let p = self.scenario.prob_treated(x);
        match a {
            Treatment::Pos => p,
            Treatment::Neg => 1.0 - p,
        }
    }
}

/// The generating mean outcome, shared by every scenario.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrueOutcome;

impl OutcomeRegression for TrueOutcome {
    fn predict(&self, x: &[f64], a: Treatment) -> f64 {
        Scenario::main_effect(x) + a.value() * Scenario::contrast(x)
    }
}

fn draw_covariates(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n * P).map(|_| rng.sample(StandardNormal)).collect()
}

/// A training sample of size `spec.n`; the same seed gives the same data.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Dataset {
    let n = spec.n.max(1);
    let mut rng = stream_rng(seed, stream_key(&[0x5ce, spec.scenario.number() as u64]));
    let x = draw_covariates(&mut rng, n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for row in x.chunks_exact(P) {
        let treat = if rng.random::<f64>() < spec.scenario.prob_treated(row) {
            Treatment::Pos
        } else {
            Treatment::Neg
        };
        let e: f64 = rng.sample(StandardNormal);
        y.push(TrueOutcome.predict(row, treat) + e);
        a.push(treat);
    }
    Dataset::new(x, P, a, y).expect("generated data is well formed")
}

/// Fresh covariate draws with their noiseless mean outcomes, used to score
/// any rule by its true value.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    x: Vec<f64>,
    main: Vec<f64>,
    contrast: Vec<f64>,
}

impl ValidationSet {
    pub fn new(scenario: Scenario, draws: usize, seed: u64) -> Self {
        let draws = draws.max(1);
        let mut rng = stream_rng(seed, stream_key(&[0x7a1, scenario.number() as u64]));
        let x = draw_covariates(&mut rng, draws);
        let main = x.chunks_exact(P).map(Scenario::main_effect).collect();
        let contrast = x.chunks_exact(P).map(Scenario::contrast).collect();
        ValidationSet { x, main, contrast }
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Mean and standard error of `main(x) + d(x) c(x)` over the draws.
    pub fn value_with_se(&self, rule: impl Fn(&[f64]) -> Treatment) -> (f64, f64) {
        let vals: Vec<f64> = self
            .x
            .chunks_exact(P)
            .zip(self.main.iter().zip(&self.contrast))
            .map(|(row, (m, c))| m + rule(row).value() * c)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, (var / n).sqrt())
    }

    pub fn value(&self, rule: impl Fn(&[f64]) -> Treatment) -> f64 {
        self.value_with_se(rule).0
    }

    pub fn value_of(&self, rule: &LinearRule) -> f64 {
        self.value(|x| Treatment::from_sign(rule.decision_value_unchecked(x)))
    }
}

/// Monte Carlo estimate of the true value of `rule` from `draws` fresh
/// covariate vectors, with its standard error.
pub fn true_value_mc_with_se(
    rule: impl Fn(&[f64]) -> Treatment,
    scenario: Scenario,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    ValidationSet::new(scenario, draws, seed).value_with_se(rule)
}

pub fn true_value_mc(rule: impl Fn(&[f64]) -> Treatment, scenario: Scenario, draws: usize, seed: u64) -> f64 {
    true_value_mc_with_se(rule, scenario, draws, seed).0
}

/// The optimal rule `sgn c(x)`.
pub fn optimal_rule(x: &[f64]) -> Treatment {
    Treatment::from_sign(Scenario::contrast(x))
}

/// Which of the two nuisance models are correctly specified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelSpec {
    CC,
    CI,
    IC,
    II,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 4] = [ModelSpec::CC, ModelSpec::CI, ModelSpec::IC, ModelSpec::II];

    pub fn code(self) -> &'static str {
        match self {
            ModelSpec::CC => "CC",
            ModelSpec::CI => "CI",
            ModelSpec::IC => "IC",
            ModelSpec::II => "II",
        }
    }

    pub fn propensity_correct(self) -> bool {
        matches!(self, ModelSpec::CC | ModelSpec::CI)
    }

    pub fn outcome_correct(self) -> bool {
        matches!(self, ModelSpec::CC | ModelSpec::IC)
    }

    /// Scenario 3 uses the Scenario 2 models.
    pub fn propensity_features(self, scenario: Scenario) -> FeatureSpec {
        let s = match (self.propensity_correct(), scenario) {
            (true, Scenario::One) => "1,x1,x2,x1*x2",
            (true, _) => "1,x1",
            (false, Scenario::One) => "linear",
            (false, _) => "intercept",
        };
        FeatureSpec::new(s)
    }

    pub fn outcome_features(self) -> FeatureSpec {
        FeatureSpec::new(if self.outcome_correct() {
            "quadratic,a,a*x1,a*x2"
        } else {
            "linear*a"
        })
    }

    pub fn nuisance_spec(self, scenario: Scenario) -> NuisanceSpec {
        NuisanceSpec {
            propensity_features: self.propensity_features(scenario),
            outcome_features: Some(self.outcome_features()),
            ..NuisanceSpec::default()
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ModelSpec {
    type Err = EarlError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" => Ok(ModelSpec::CC),
            "CI" => Ok(ModelSpec::CI),
            "IC" => Ok(ModelSpec::IC),
            "II" => Ok(ModelSpec::II),
            _ => Err(EarlError::config(format!("model spec must be CC, CI, IC or II, got `{s}`"))),
        }
    }
}

/// Estimators compared by the simulation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Earl(LossKey),
    Owl,
    Qlearning,
    Aipwe,
}

/// [`SurrogateLoss`] with an ordering, for use as a sort key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LossKey(u8);

impl From<SurrogateLoss> for LossKey {
    fn from(l: SurrogateLoss) -> Self {
        LossKey(SurrogateLoss::ALL.iter().position(|m| *m == l).unwrap_or(0) as u8)
    }
}

impl LossKey {
    pub fn loss(self) -> SurrogateLoss {
        SurrogateLoss::ALL[self.0 as usize]
    }
}

impl Method {
    pub fn earl(loss: SurrogateLoss) -> Self {
        Method::Earl(loss.into())
    }

    pub fn label(self) -> String {
        match self {
            Method::Earl(l) => format!("earl-{}", l.loss()),
            Method::Owl => "owl".into(),
            Method::Qlearning => "ql".into(),
            Method::Aipwe => "aipwe".into(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = EarlError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "owl" => Ok(Method::Owl),
            "ql" | "qlearning" => Ok(Method::Qlearning),
            "aipwe" => Ok(Method::Aipwe),
            "earl" => Ok(Method::earl(SurrogateLoss::Logistic)),
            other => match other.strip_prefix("earl-") {
                Some(loss) => Ok(Method::earl(loss.parse()?)),
                None => Err(EarlError::config(format!(
                    "unknown method `{other}` (expected earl-<loss>, owl, ql or aipwe)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Method {
    type Error = EarlError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenarios: Vec<Scenario>,
    pub specs: Vec<ModelSpec>,
    pub methods: Vec<Method>,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub validation_draws: usize,
    /// Choose `lambda` by cross-validation for EARL and OWL; otherwise use
    /// `earl.lambda`.
    pub select_lambda: bool,
    pub earl: EarlConfig,
    pub search: SearchConfig,
    /// Record wall-clock seconds per fit. Off by default so output is
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenarios: vec![Scenario::One, Scenario::Two],
            specs: ModelSpec::ALL.to_vec(),
            methods: vec![Method::earl(SurrogateLoss::Logistic), Method::Qlearning, Method::Owl, Method::Aipwe],
            n_grid: vec![200, 500, 1000, 2500],
            replicates: 100,
            seed: 0,
            validation_draws: 10_000,
            select_lambda: true,
            earl: EarlConfig::default(),
            search: SearchConfig::default(),
            timing: false,
        }
    }
}

impl ExperimentConfig {
    /// The validation draws [`run_experiment`] scores rules on.
    pub fn validation_set(&self, scenario: Scenario) -> ValidationSet {
        ValidationSet::new(scenario, self.validation_draws, stream_key(&[self.seed, 0xa1]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.specs.is_empty() || self.methods.is_empty() || self.n_grid.is_empty() {
            return Err(EarlError::config("scenario, spec, method and sample-size grids must be nonempty"));
        }
        if self.replicates == 0 {
            return Err(EarlError::config("replicates must be >= 1"));
        }
        if let Some(n) = self.n_grid.iter().find(|&&n| n < 2 * self.earl.cv_folds.max(self.earl.folds)) {
            return Err(EarlError::config(format!("sample size {n} is too small for the fold counts")));
        }
        self.earl.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub scenario: Scenario,
    pub spec: ModelSpec,
    pub n: usize,
    pub replicate: usize,
    /// True value of the fitted rule on the validation draws; NaN if the fit
    /// failed.
    pub value: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

impl ExperimentResult {
    fn key(&self) -> (Method, Scenario, ModelSpec, usize, usize) {
        (self.method, self.scenario, self.spec, self.n, self.replicate)
    }
}

/// Fits one method on one training set.
pub fn fit_method(
    method: Method,
    data: &Dataset,
    scenario: Scenario,
    spec: ModelSpec,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<LinearRule> {
    let nspec = spec.nuisance_spec(scenario);
    let earl_cfg = EarlConfig { seed, ..config.earl.clone() };
    match method {
        Method::Earl(loss) => {
            let cfg = EarlConfig { loss: loss.loss(), ..earl_cfg };
            let lambda = if config.select_lambda {
                select_lambda(data, &nspec, &cfg)?.lambda
            } else {
                cfg.lambda
            };
            let nuis = fit_nuisance(data, &nspec)?;
            let weights = compute_all_weights(data, &nuis, &nuis)?;
            Ok(earl_fit(data, &weights, &cfg.with_lambda(lambda))?.rule)
        }
        Method::Owl => {
            let ospec = NuisanceSpec { outcome_features: None, ..nspec };
            let cfg = EarlConfig { loss: SurrogateLoss::Hinge, ..earl_cfg };
            let lambda = if config.select_lambda {
                select_lambda(data, &ospec, &cfg)?.lambda
            } else {
                cfg.lambda
            };
            let nuis = fit_nuisance(data, &ospec)?;
            Ok(owl_fit(data, &nuis, &cfg.with_lambda(lambda))?.rule)
        }
        Method::Qlearning => {
            let map = spec.outcome_features().resolve(data.p())?;
            Ok(qlearning_fit(data, &map)?.rule)
        }
        Method::Aipwe => {
            let nuis = fit_nuisance(data, &nspec)?;
            let seed_rule = nuis.outcome.as_ref().map(|m| m.contrast_rule());
            let search = SearchConfig { seed, ..config.search.clone() };
            Ok(aipwe_direct_search(data, &nuis, &nuis, seed_rule.as_ref(), &search)?.rule)
        }
    }
}

/// Runs every (method, scenario, spec, n, replicate) cell. All methods and
/// specs in a (scenario, n, replicate) cell share one training set; every
/// scenario has one validation set. Failed fits are recorded with a NaN
/// value and the run continues. Results are sorted by key.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    let validation: Vec<(Scenario, ValidationSet)> = config
        .scenarios
        .iter()
        .map(|&s| (s, config.validation_set(s)))
        .collect();
    let mut cells = Vec::new();
    for &scenario in &config.scenarios {
        for &n in &config.n_grid {
            for r in 0..config.replicates {
                cells.push((scenario, n, r));
            }
        }
    }
    let mut results: Vec<ExperimentResult> = cells
        .par_iter()
        .flat_map_iter(|&(scenario, n, replicate)| {
            let seed = stream_key(&[config.seed, scenario.number() as u64, n as u64, replicate as u64]);
            let data = generate_scenario(&ScenarioSpec::new(scenario, n), seed);
            let val = &validation.iter().find(|(s, _)| *s == scenario).expect("validation set per scenario").1;
            let mut out = Vec::new();
            for &spec in &config.specs {
                for &method in &config.methods {
                    let start = Instant::now();
                    let fit = fit_method(method, &data, scenario, spec, config, seed);
                    let seconds = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
                    let (value, error) = match fit {
                        Ok(rule) => (val.value_of(&rule), None),
                        Err(e) => {
                            log::warn!("{method} {scenario}/{spec} n={n} rep={replicate} failed: {e}");
                            (f64::NAN, Some(e.to_string()))
                        }
                    };
                    out.push(ExperimentResult {
                        method,
                        scenario,
                        spec,
                        n,
                        replicate,
                        value,
                        seconds,
                        error,
                    });
                }
            }
            out
        })
        .collect();
    results.sort_by_key(ExperimentResult::key);
    Ok(results)
}

/// Writes `method,scenario,spec,n,replicate,value,seconds`.
pub fn write_results_csv<W: Write>(results: &[ExperimentResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| EarlError::Io(std::io::Error::other(e));
    w.write_record(["method", "scenario", "spec", "n", "replicate", "value", "seconds"])
        .map_err(io)?;
    for r in results {
        w.write_record([
            r.method.label(),
            r.scenario.to_string(),
            r.spec.to_string(),
            r.n.to_string(),
            r.replicate.to_string(),
            r.value.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
