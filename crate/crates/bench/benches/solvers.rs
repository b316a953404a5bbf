use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use earl_core::sim::ModelSpec;
use earl_core::{
    aipwe_direct_search, compute_all_weights, earl_fit, fit_nuisance, generate_scenario, select_lambda, EarlConfig,
    Scenario, ScenarioSpec, SearchConfig, SurrogateLoss,
};

fn solvers(c: &mut Criterion) {
    let data = generate_scenario(&ScenarioSpec::new(Scenario::Two, 1000), 1);
    let spec = ModelSpec::CC.nuisance_spec(Scenario::Two);
    let nuis = fit_nuisance(&data, &spec).unwrap();
    let weights = compute_all_weights(&data, &nuis, &nuis).unwrap();

    let mut group = c.benchmark_group("earl_fit_n1000");
    group.sample_size(10);
    for loss in SurrogateLoss::ALL {
        let cfg = EarlConfig { loss, lambda: 0.125, ..EarlConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(loss), &cfg, |b, cfg| {
            b.iter(|| earl_fit(&data, &weights, cfg).unwrap())
        });
    }
    group.finish();

    c.bench_function("nuisance_fit_cc_n1000", |b| b.iter(|| fit_nuisance(&data, &spec).unwrap()));

    let mut group = c.benchmark_group("selection");
    group.sample_size(10);
    group.bench_function("select_lambda_logistic_n1000", |b| {
        b.iter(|| select_lambda(&data, &spec, &EarlConfig::default()).unwrap())
    });
    let search = SearchConfig { population: 50, generations: 50, ..SearchConfig::default() };
    group.bench_function("aipwe_search_n1000", |b| {
        b.iter(|| aipwe_direct_search(&data, &nuis, &nuis, None, &search).unwrap())
    });
    group.finish();
}

criterion_group!(benches, solvers);
criterion_main!(benches);
