use std::fmt;
use std::path::Path;

use earl_core::{
    earl_fit_crossfit, fit_nuisance, fit_pipeline, load_csv, owl_fit, qlearning_fit, run_experiment, select_lambda,
    value_aipwe, value_ipwe, value_ipwe_normalized, write_results_csv, Dataset, EarlConfig, EarlError,
    ExperimentConfig, FeatureSpec, LinearRule, Method, ModelSpec, NuisanceSpec, Result as CoreResult, RuleRecord,
    Scenario, SurrogateLoss, ValueEstimate,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::write_output;
use crate::{FitOptions, SimulateArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Core(EarlError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                EarlError::Config(_) => 2,
                EarlError::NonConvergence(_) | EarlError::Numerical(_) => 4,
                EarlError::InputShape(_)
                | EarlError::Parse { .. }
                | EarlError::Domain(_)
                | EarlError::Unsupported(_)
                | EarlError::Io(_) => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Data(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<EarlError> for CliError {
    fn from(e: EarlError) -> Self {
        CliError::Core(e)
    }
}

/// Seed sources other than a config file, in priority order around it:
/// the flag beats the file, the file beats the environment.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub flag: Option<u64>,
    pub env: Option<u64>,
}

impl Seeds {
    fn resolve(self, file: Option<u64>) -> u64 {
        self.flag.or(file).or(self.env).unwrap_or(0)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let raw: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed = serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((parsed, raw))
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| CliError::Config(format!("bad {what} `{s}`: {e}"))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Earl,
    Owl,
    Ql,
}

impl std::str::FromStr for FitMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "earl" => Ok(FitMethod::Earl),
            "owl" => Ok(FitMethod::Owl),
            "ql" => Ok(FitMethod::Ql),
            _ => Err(format!("unknown method `{s}` (expected earl, owl or ql)")),
        }
    }
}

/// Contents of a `--config` file for `fit` and `permtest`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitPlan {
    pub method: FitMethod,
    pub select_lambda: bool,
    pub crossfit: bool,
    pub seed: Option<u64>,
    pub earl: EarlConfig,
    pub nuisance: NuisanceSpec,
}

impl Default for FitPlan {
    fn default() -> Self {
        FitPlan {
            method: FitMethod::Earl,
            select_lambda: false,
            crossfit: false,
            seed: None,
            earl: EarlConfig::default(),
            nuisance: NuisanceSpec::default(),
        }
    }
}

impl FitPlan {
    fn build(options: &FitOptions, seeds: Seeds) -> Result<FitPlan, CliError> {
        let mut plan = match &options.config {
            Some(path) => read_json::<FitPlan>(path)?.0,
            None => FitPlan::default(),
        };
        if let Some(m) = &options.method {
            plan.method = m.parse().map_err(CliError::Config)?;
        }
        if let Some(l) = &options.loss {
            plan.earl.loss = l.parse::<SurrogateLoss>()?;
        }
        if let Some(l) = options.lambda {
            plan.earl.lambda = l;
        }
        plan.select_lambda |= options.select_lambda;
        plan.crossfit |= options.crossfit;
        if let Some(k) = options.folds {
            plan.earl.folds = k;
        }
        if let Some(k) = options.cv_folds {
            plan.earl.cv_folds = k;
        }
        if let Some(f) = &options.rule_features {
            plan.earl.rule_features = FeatureSpec::new(f.clone());
        }
        if let Some(f) = &options.propensity_features {
            plan.nuisance.propensity_features = FeatureSpec::new(f.clone());
        }
        if let Some(f) = &options.outcome_features {
            plan.nuisance.outcome_features = (f != "none").then(|| FeatureSpec::new(f.clone()));
        }
        if let Some(r) = options.ridge {
            plan.nuisance.ridge = r;
        }
        let seed = seeds.resolve(plan.seed);
        plan.seed = Some(seed);
        plan.earl.seed = seed;
        plan.earl.validate()?;
        if plan.method == FitMethod::Ql && plan.nuisance.outcome_features.is_none() {
            return Err(CliError::Config("Q-learning needs outcome features".into()));
        }
        if plan.method != FitMethod::Earl && plan.crossfit {
            return Err(CliError::Config("cross-fitting applies to the earl method only".into()));
        }
        Ok(plan)
    }

    /// The nuisance models the rule's value is judged with.
    fn evaluation_spec(&self) -> NuisanceSpec {
        match self.method {
            FitMethod::Owl => NuisanceSpec { outcome_features: None, ..self.nuisance.clone() },
            _ => self.nuisance.clone(),
        }
    }
}

struct Fitted {
    rule: LinearRule,
    lambda: Option<f64>,
    cv_table: Option<Value>,
    per_fold: Option<Vec<RuleRecord>>,
}

fn fit_rule(data: &Dataset, plan: &FitPlan) -> CoreResult<Fitted> {
    match plan.method {
        FitMethod::Earl if plan.crossfit => {
            let mut cfg = plan.earl.clone();
            let mut cv_table = None;
            if plan.select_lambda {
                let sel = select_lambda(data, &plan.nuisance, &cfg)?;
                cfg.lambda = sel.lambda;
                cv_table = Some(serde_json::to_value(&sel.table).expect("table serializes"));
            }
            let cf = earl_fit_crossfit(data, &plan.nuisance, &cfg)?;
            for w in &cf.warnings {
                log::warn!("{w}");
            }
            Ok(Fitted {
                per_fold: cf.fit.per_fold_rules.as_ref().map(|r| r.iter().map(LinearRule::to_record).collect()),
                rule: cf.fit.rule,
                lambda: Some(cfg.lambda),
                cv_table,
            })
        }
        FitMethod::Earl => {
            let fit = fit_pipeline(data, &plan.nuisance, &plan.earl, plan.select_lambda)?;
            Ok(Fitted {
                lambda: Some(fit.fit.lambda_used),
                cv_table: fit
                    .selection
                    .map(|s| serde_json::to_value(&s.table).expect("table serializes")),
                rule: fit.fit.rule,
                per_fold: None,
            })
        }
        FitMethod::Owl => {
            let spec = plan.evaluation_spec();
            let mut cfg = EarlConfig { loss: SurrogateLoss::Hinge, ..plan.earl.clone() };
            let mut cv_table = None;
            if plan.select_lambda {
                let sel = select_lambda(data, &spec, &cfg)?;
                cfg.lambda = sel.lambda;
                cv_table = Some(serde_json::to_value(&sel.table).expect("table serializes"));
            }
            let nuis = fit_nuisance(data, &spec)?;
            let fit = owl_fit(data, &nuis, &cfg)?;
            Ok(Fitted { rule: fit.rule, lambda: Some(cfg.lambda), cv_table, per_fold: None })
        }
        FitMethod::Ql => {
            let features = plan.nuisance.outcome_features.as_ref().expect("checked in FitPlan::build");
            let fit = qlearning_fit(data, &features.resolve(data.p())?)?;
            Ok(Fitted { rule: fit.rule, lambda: None, cv_table: None, per_fold: None })
        }
    }
}

/// The JSON written by `fit` and read by `evaluate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleArtifact {
    pub method: FitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<SurrogateLoss>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub rule_features: FeatureSpec,
    /// Nuisance models used to evaluate the rule.
    pub nuisance: NuisanceSpec,
    pub seed: u64,
    pub in_sample_aipwe: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_table: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<Vec<RuleRecord>>,
}

impl RuleArtifact {
    fn rule(&self, p: usize) -> CoreResult<LinearRule> {
        let rec = RuleRecord { features: self.rule_features.clone(), beta0: self.beta0, beta: self.beta.clone() };
        LinearRule::from_record(&rec, p)
    }
}

pub fn fit(input: &Path, output: Option<&Path>, options: &FitOptions, seeds: Seeds) -> Result<(), CliError> {
    let plan = FitPlan::build(options, seeds)?;
    let data = load_csv(input)?;
    let fitted = fit_rule(&data, &plan)?;
    let spec = plan.evaluation_spec();
    let nuis = fit_nuisance(&data, &spec)?;
    let in_sample = value_aipwe(&data, &fitted.rule, &nuis, &nuis)?.estimate;
    let record = fitted.rule.to_record();
    let artifact = RuleArtifact {
        method: plan.method,
        loss: match plan.method {
            FitMethod::Earl => Some(plan.earl.loss),
            FitMethod::Owl => Some(SurrogateLoss::Hinge),
            FitMethod::Ql => None,
        },
        lambda: fitted.lambda,
        beta0: record.beta0,
        beta: record.beta,
        rule_features: record.features,
        nuisance: spec,
        seed: plan.earl.seed,
        in_sample_aipwe: in_sample,
        cv_table: fitted.cv_table,
        per_fold: fitted.per_fold,
    };
    write_output(output, &to_json(&artifact)?)
}

fn estimate_json(result: CoreResult<ValueEstimate>) -> Result<Value, CliError> {
    match result {
        Ok(v) => Ok(json!({ "value": v.estimate, "n_effective": v.n_effective })),
        Err(e @ EarlError::Unsupported(_)) => Ok(json!({ "error": e.to_string() })),
        Err(e) => Err(e.into()),
    }
}

pub fn evaluate(rule_path: &Path, input: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(rule_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", rule_path.display())))?;
    let artifact: RuleArtifact = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{} is not a rule file: {e}", rule_path.display())))?;
    let data = load_csv(input)?;
    let rule = artifact.rule(data.p())?;
    let nuis = fit_nuisance(&data, &artifact.nuisance)?;
    let report = json!({
        "method": artifact.method,
        "n": data.n(),
        "ipwe": estimate_json(value_ipwe(&data, &rule, &nuis))?,
        "aipwe": estimate_json(value_aipwe(&data, &rule, &nuis, &nuis))?,
        "ipwe_normalized": estimate_json(value_ipwe_normalized(&data, &rule, &nuis))?,
    });
    write_output(output, &to_json(&report)?)
}

pub fn simulate(args: &SimulateArgs, seeds: Seeds) -> Result<(), CliError> {
    let (mut config, file_seed) = match &args.config {
        Some(path) => {
            let (cfg, raw): (ExperimentConfig, Value) = read_json(path)?;
            let seed = raw.get("seed").map(|_| cfg.seed);
            (cfg, seed)
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = &args.scenarios {
        config.scenarios = parse_list::<Scenario>(s, "scenario")?;
    }
    if let Some(s) = &args.specs {
        config.specs = parse_list::<ModelSpec>(s, "spec")?;
    }
    if let Some(s) = &args.methods {
        config.methods = parse_list::<Method>(s, "method")?;
    }
    if let Some(s) = &args.n_grid {
        config.n_grid = parse_list::<usize>(s, "sample size")?;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(d) = args.validation_draws {
        config.validation_draws = d;
    }
    if args.fixed_lambda {
        config.select_lambda = false;
    }
    if let Some(l) = args.lambda {
        config.earl.lambda = l;
    }
    config.timing |= args.timing;
    config.seed = seeds.resolve(file_seed);
    config.validate()?;

    let results = run_experiment(&config)?;
    for r in results.iter().filter(|r| r.error.is_some()) {
        log::warn!(
            "{} scenario {} {} n={} replicate {}: {}",
            r.method,
            r.scenario,
            r.spec.code(),
            r.n,
            r.replicate,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let mut bytes = Vec::new();
    write_results_csv(&results, &mut bytes)?;
    write_output(args.output.as_deref(), &bytes)
}

pub fn permtest(
    input: &Path,
    output: Option<&Path>,
    covariates: Option<&str>,
    permutations: usize,
    options: &FitOptions,
    seeds: Seeds,
) -> Result<(), CliError> {
    let plan = FitPlan::build(options, seeds)?;
    let data = load_csv(input)?;
    let covariates: Vec<usize> = match covariates {
        Some(list) => parse_list::<usize>(list, "covariate")?
            .into_iter()
            .map(|j| {
                if (1..=data.p()).contains(&j) {
                    Ok(j - 1)
                } else {
                    Err(CliError::Config(format!("covariate {j} out of range 1..={}", data.p())))
                }
            })
            .collect::<Result<_, _>>()?,
        None => (0..data.p()).collect(),
    };
    let pipeline = |d: &Dataset| fit_rule(d, &plan).map(|f| f.rule);
    let report = earl_core::permutation_report(&data, pipeline, &covariates, permutations, plan.earl.seed)?;
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    write_output(output, &bytes)
}
