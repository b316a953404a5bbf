use super::*;
use crate::earl::earl_objective;
use crate::nuisance::{fit_nuisance, ZeroOutcome};
use crate::rng::stream_rng;
use crate::sim::{
    generate_scenario, optimal_rule, true_value_mc, ModelSpec, Scenario, ScenarioSpec, TrueOutcome, TruePropensity,
};
use crate::value::value_aipwe;

fn test_grid(n: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(404, 0);
    (0..n)
        .map(|_| (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn agreement(rule: &LinearRule, other: impl Fn(&[f64]) -> Treatment, grid: &[Vec<f64>]) -> f64 {
    grid.iter().filter(|x| rule.apply(x).unwrap() == other(x)).count() as f64 / grid.len() as f64
}

fn two_arm(values: &[(f64, Treatment, f64)]) -> Dataset {
    let rows: Vec<Vec<f64>> = values.iter().map(|v| vec![v.0]).collect();
    Dataset::from_rows(&rows, values.iter().map(|v| v.1).collect(), values.iter().map(|v| v.2).collect()).unwrap()
}

#[test]
fn qlearning_argmax_and_ties() {
    let pts: Vec<(f64, Treatment, f64)> = (0..10)
        .map(|i| {
            let a = if i % 2 == 0 { Treatment::Pos } else { Treatment::Neg };
            (i as f64, a, if a == Treatment::Pos { 2.0 } else { 1.0 })
        })
        .collect();
    let map = FeatureMap::parse("1,a", 1).unwrap();
    let fit = qlearning_fit(&two_arm(&pts), &map).unwrap();
    assert!((0..10).all(|i| fit.rule.apply(&[i as f64]).unwrap() == Treatment::Pos));
    assert_eq!(fit.method, BaselineMethod::Qlearning);

    let flat: Vec<_> = pts.iter().map(|(x, a, _)| (*x, *a, 1.0)).collect();
    let fit = qlearning_fit(&two_arm(&flat), &map).unwrap();
    assert!(fit.rule.beta0.abs() < 1e-12);
    let exact = LinearRule::new(0.0, vec![], fit.rule.features().clone()).unwrap();
    assert_eq!(exact.apply(&[3.0]).unwrap(), Treatment::Pos);
}

#[test]
fn qlearning_recovers_the_contrast() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 50_000), 7);
    let map = ModelSpec::CC.outcome_features().resolve(10).unwrap();
    let fit = qlearning_fit(&data, &map).unwrap();
    assert!(agreement(&fit.rule, optimal_rule, &test_grid(10_000)) >= 0.98);
}

#[test]
fn qlearning_ignores_treatment_free_shifts() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 50_000), 8);
    let map = ModelSpec::CC.outcome_features().resolve(10).unwrap();
    let base = qlearning_fit(&data, &map).unwrap();
    let shifted_y = (0..data.n())
        .map(|i| data.outcome(i) + 3.0 * data.row(i)[4] - data.row(i)[6].powi(2))
        .collect();
    let shifted = qlearning_fit(&data.with_outcomes(shifted_y).unwrap(), &map).unwrap();
    let grid = test_grid(10_000);
    let same = grid
        .iter()
        .filter(|x| base.rule.apply(x).unwrap() == shifted.rule.apply(x).unwrap())
        .count();
    assert!(same as f64 / grid.len() as f64 >= 0.99);
}

#[test]
fn owl_objective_is_earl_with_zero_outcome() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::One, 200), 5);
    let shifted = data.with_outcomes(data.outcomes().iter().map(|y| y.abs()).collect()).unwrap();
    let prop = TruePropensity::new(Scenario::One);
    let weights = compute_all_weights(&shifted, &prop, &ZeroOutcome).unwrap();
    let map = FeatureMap::parse("linear", 10).unwrap().without_intercept();
    let mut rng = stream_rng(3, 3);
    for _ in 0..50 {
        let beta: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = LinearRule::new(rng.random_range(-1.0..1.0), beta, map.clone()).unwrap();
        let lambda = rng.random_range(0.0..1.0);
        let a = owl_objective(&r, &shifted, &prop, lambda).unwrap();
        let b = earl_objective(&r, &weights, &shifted, SurrogateLoss::Hinge, lambda).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn owl_shifts_negative_outcomes() {
    let pts: Vec<_> = (0..20)
        .map(|i| {
            let a = if i % 2 == 0 { Treatment::Pos } else { Treatment::Neg };
            (i as f64 / 10.0, a, i as f64 - 5.0)
        })
        .collect();
    let prop = |_: &[f64], _: Treatment| 0.5;
    let cfg = EarlConfig { lambda: 0.1, subgradient_iterations: 2000, ..EarlConfig::default() };
    let fit = owl_fit(&two_arm(&pts), &prop, &cfg).unwrap();
    assert_eq!(fit.outcome_shift, 5.0);
    assert!(fit.objective_value.is_some());
}

#[test]
fn owl_symmetric_data_keeps_zero() {
    // Every covariate value appears once under each arm with the same outcome.
    let pts: Vec<_> = (0..30)
        .flat_map(|i| {
            let x = i as f64 / 7.0 - 2.0;
            [(x, Treatment::Pos, 3.0), (x, Treatment::Neg, 3.0)]
        })
        .collect();
    let data = two_arm(&pts);
    let prop = |_: &[f64], _: Treatment| 0.5;
    let cfg = EarlConfig { lambda: 0.1, rule_features: FeatureSpec::new("linear"), ..EarlConfig::default() };
    let fit = owl_fit(&data, &prop, &cfg).unwrap();
    let zero = LinearRule::zero(fit.rule.features().clone());
    let at_zero = owl_objective(&zero, &data, &prop, 0.1).unwrap();
    assert!((fit.objective_value.unwrap() - at_zero).abs() < 1e-8);
}

#[test]
fn owl_value_near_optimum() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 2000), 21);
    let prop = TruePropensity::new(Scenario::Two);
    let cfg = EarlConfig { lambda: 1.0 / 32.0, ..EarlConfig::default() };
    let fit = owl_fit(&data, &prop, &cfg).unwrap();
    let r = &fit.rule;
    let v = true_value_mc(|x| r.apply(x).unwrap(), Scenario::Two, 100_000, 2);
    let v_star = true_value_mc(optimal_rule, Scenario::Two, 100_000, 2);
    assert!(v_star - v < 0.5, "V* {v_star}, V {v}");
}

fn small_search(seed: u64) -> SearchConfig {
    SearchConfig {
        population: 40,
        generations: 30,
        seed,
        ..SearchConfig::default()
    }
}

#[test]
fn search_beats_its_seed_and_is_elitist() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 500), 9);
    let nuis = fit_nuisance(&data, &ModelSpec::CI.nuisance_spec(Scenario::Two)).unwrap();
    let seed_rule = nuis.outcome.as_ref().unwrap().contrast_rule();
    let seed_rule = {
        // Put the seed on the search basis so their values are comparable.
        let map = FeatureMap::parse("linear", 10).unwrap().without_intercept();
        LinearRule::new(seed_rule.beta0, project_rule(&seed_rule, &map)[1..].to_vec(), map).unwrap()
    };
    let fit = aipwe_direct_search(&data, &nuis, &nuis, Some(&seed_rule), &small_search(1)).unwrap();
    let got = value_aipwe(&data, &fit.rule, &nuis, &nuis).unwrap().estimate;
    let seeded = value_aipwe(&data, &seed_rule, &nuis, &nuis).unwrap().estimate;
    assert!(got >= seeded, "{got} < {seeded}");
    assert_eq!(fit.fitness_trace.len(), 30);
    assert!(fit.fitness_trace.windows(2).all(|w| w[1] >= w[0]));
    assert!((fit.fitness_trace[29] - got).abs() < 1e-12);
    let norm: f64 = fit.rule.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn search_is_deterministic() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::One, 300), 2);
    let prop = TruePropensity::new(Scenario::One);
    let a = aipwe_direct_search(&data, &prop, &TrueOutcome, None, &small_search(5)).unwrap();
    let b = aipwe_direct_search(&data, &prop, &TrueOutcome, None, &small_search(5)).unwrap();
    assert_eq!(a.rule, b.rule);
    assert_eq!(a.fitness_trace, b.fitness_trace);
}

#[test]
fn search_matches_threshold_oracle_in_one_dimension() {
    for seed in 0..5 {
        let mut rng = stream_rng(seed, 1);
        let n = 50;
        let pts: Vec<_> = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let a = if rng.random::<bool>() { Treatment::Pos } else { Treatment::Neg };
                let e: f64 = rng.sample(StandardNormal);
                (x, a, x + a.value() * (x - 0.3) + e)
            })
            .collect();
        let data = two_arm(&pts);
        let prop = |_: &[f64], _: Treatment| 0.5;
        let cfg = SearchConfig { rule_features: FeatureSpec::new("x1"), ..small_search(seed) };
        let fit = aipwe_direct_search(&data, &prop, &ZeroOutcome, None, &cfg).unwrap();
        let got = value_aipwe(&data, &fit.rule, &prop, &ZeroOutcome).unwrap().estimate;

        let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        let mut cuts = vec![xs[0] - 1.0, xs[n - 1] + 1.0];
        cuts.extend(xs.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let map = FeatureMap::parse("x1", 1).unwrap();
        let best = cuts
            .iter()
            .flat_map(|&t| [(1.0, -t), (-1.0, t)])
            .map(|(s, b0)| {
                let r = LinearRule::new(b0, vec![s], map.clone()).unwrap();
                value_aipwe(&data, &r, &prop, &ZeroOutcome).unwrap().estimate
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((got - best).abs() < 1e-6, "seed {seed}: {got} vs {best}");
    }
}

#[test]
fn search_config_bounds() {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::One, 30), 2);
    let prop = TruePropensity::new(Scenario::One);
    let bad = SearchConfig { population: 5, ..SearchConfig::default() };
    assert!(aipwe_direct_search(&data, &prop, &TrueOutcome, None, &bad).is_err());
    let bad = SearchConfig { generations: 0, ..SearchConfig::default() };
    assert!(aipwe_direct_search(&data, &prop, &TrueOutcome, None, &bad).is_err());
}
