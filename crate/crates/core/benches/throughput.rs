use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mixrobust::fit::{fit, FitOptions};
use mixrobust::likelihood::QuadSettings;
use mixrobust::par::ExecMode;
use mixrobust::predict::{predict, PredictMethod};
use mixrobust::simlab::{gen_dataset, run_scenario, scenario_model, RunOptions, ScenarioConfig};

const SCENARIO: &str = "\
m = 100
covariate_scheme = within_between
cluster_sizes = 4
true_betas = -2.5, 2, 1
sigma_b = 1
true_family = tukey(g=0.5,h=0.1)
fitted_families = normal
n_replications = 8
base_seed = 11
";

fn replications(c: &mut Criterion) {
    let config = ScenarioConfig::parse(SCENARIO).unwrap();
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    for (name, exec) in [
        ("parallel", ExecMode::Parallel),
        ("sequential", ExecMode::Sequential),
    ] {
        group.bench_function(BenchmarkId::new("scenario_8_reps", name), |b| {
            b.iter(|| run_scenario(&config, RunOptions { desk: false, exec }).unwrap())
        });
    }
    group.finish();
}

fn predictions(c: &mut Criterion) {
    let config =
        ScenarioConfig::parse(&SCENARIO.replace("cluster_sizes = 4", "cluster_sizes = 40"))
            .unwrap();
    let data = gen_dataset(&config, 40, 0).unwrap();
    let model = scenario_model(&config, 0).unwrap();
    let fitted = fit(&data, &model, &FitOptions::default()).unwrap();
    let mut group = c.benchmark_group("predictions");
    for (name, exec) in [
        ("parallel", ExecMode::Parallel),
        ("sequential", ExecMode::Sequential),
    ] {
        group.bench_function(BenchmarkId::new("mode_m100_n40", name), |b| {
            b.iter(|| {
                predict(
                    &data,
                    &fitted,
                    PredictMethod::Mode,
                    QuadSettings::default(),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, replications, predictions);
criterion_main!(benches);
