use mixrobust::error::Error;
use mixrobust::family_spec::parse_family_spec;
use mixrobust::io::{format_dataset, parse_dataset, parse_start, run_dir_name};
use mixrobust::model::{parse_model_formula, RandomStructure};
use mixrobust::simlab::{
    format_medians, gen_dataset, output_dir_name, summarize, true_values, ReplicationResult,
    ScenarioConfig,
};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn start_values_follow_parameter_order() {
    let text = "parameter,value\n# comment\nlog_sigma_b,0.5\nintercept,-1\nx,2\n";
    let got = parse_start(text, &names(&["intercept", "x", "log_sigma_b"])).unwrap();
    assert_eq!(got, vec![-1.0, 2.0, 0.5]);
}

#[test]
fn start_values_reject_bad_files() {
    let want = names(&["intercept", "x"]);
    for bad in [
        "intercept,1\n",
        "intercept,1\nx,2\nz,3\n",
        "intercept,1\nintercept,2\nx,0\n",
        "intercept,one\nx,0\n",
    ] {
        assert!(
            matches!(parse_start(bad, &want), Err(Error::Csv(_))),
            "{bad:?}"
        );
    }
}

#[test]
fn formula_resolution_checks_columns() {
    let f = parse_model_formula("bernoulli ~ z + t | t").unwrap();
    let spec = f
        .resolve(
            &names(&["t", "z", "extra"]),
            parse_family_spec("bvnormal").unwrap(),
        )
        .unwrap();
    assert_eq!(spec.covariate_names, names(&["z", "t"]));
    assert_eq!(
        spec.random,
        RandomStructure::InterceptAndSlope { slope_covariate: 1 }
    );

    let err = parse_model_formula("bernoulli ~ z + bmi")
        .unwrap()
        .resolve(&names(&["z"]), parse_family_spec("normal").unwrap())
        .unwrap_err();
    assert!(err.to_string().contains("bmi"), "{err}");
    // a scalar family cannot carry a random slope
    assert!(f
        .resolve(&names(&["z", "t"]), parse_family_spec("normal").unwrap())
        .is_err());
}

#[test]
fn simulated_data_round_trips_through_csv() {
    let cfg = ScenarioConfig::parse(
        "m = 12\ncovariate_scheme = slopes_design\ntrue_betas = -6, 2, 1\n\
         true_family = bvnormal(var0=5,varw=5,corr=0.9)\nfitted_families = bvnormal\nn_replications = 1\n",
    )
    .unwrap();
    let data = gen_dataset(&cfg, 6, 0).unwrap();
    let text = format_dataset(&data);
    let back = parse_dataset(&text).unwrap();
    assert_eq!(back.clusters, data.clusters);
    assert_eq!(format_dataset(&back), text);
}

#[test]
fn run_directories_are_keyed_by_seed_and_content() {
    let a = run_dir_name(4, "m = 10\n");
    assert!(
        a.starts_with("seed4-") && a.len() == "seed4-".len() + 8,
        "{a}"
    );
    assert_ne!(a, run_dir_name(4, "m = 11\n"));
    assert_ne!(a, run_dir_name(5, "m = 10\n"));
    let cfg = ScenarioConfig::parse(
        "m = 20\ncovariate_scheme = within_between\ncluster_sizes = 2\ntrue_betas = -1, 1, 1\n\
         true_family = normal\nfitted_families = normal\nn_replications = 3\nbase_seed = 9\n",
    )
    .unwrap();
    assert_eq!(output_dir_name(&cfg, false), output_dir_name(&cfg, false));
    assert_ne!(output_dir_name(&cfg, false), output_dir_name(&cfg, true));
}

fn replication(rep: usize, est: [f64; 6], converged: bool) -> ReplicationResult {
    ReplicationResult {
        replication: rep,
        cluster_size: 6,
        family_index: 0,
        family: "bvnormal".into(),
        seed: rep as u64,
        names: names(&[
            "intercept",
            "z",
            "t",
            "log_sd_intercept",
            "log_sd_slope",
            "atanh_corr",
        ]),
        estimates: est.to_vec(),
        std_errors: None,
        loglik: -1.0,
        converged,
        iterations: 1,
        msep_mode: vec![0.0, 0.0],
        msep_mean: vec![0.0, 0.0],
        error: None,
        predictions: None,
    }
}

#[test]
fn medians_table_lists_fixed_effects_only() {
    let cfg = ScenarioConfig::parse(
        "m = 20\ncovariate_scheme = slopes_design\ntrue_betas = -6, 2, 1\n\
         true_family = bvnormal(var0=5,varw=5,corr=0.9)\nfitted_families = bvnormal\nn_replications = 3\n",
    )
    .unwrap();
    let results = [
        replication(0, [-6.0, 2.0, 1.0, 0.0, 0.0, 0.0], true),
        replication(1, [-7.0, 3.0, 0.5, 0.0, 0.0, 0.0], true),
        replication(2, [-5.0, 2.5, 2.0, 0.0, 0.0, 0.0], false),
    ];
    let table = summarize(&results, &true_values(&cfg), false);
    let text = format_medians(&table, &names(&["intercept", "z", "t"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert_eq!(
        lines[0],
        "cluster_size,fitted_family,parameter,truth,median,convergence_rate,n"
    );
    let z: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&z[..3], &["6", "bvnormal", "z"]);
    assert_eq!(z[4].parse::<f64>().unwrap(), 2.5);
    assert!((z[5].parse::<f64>().unwrap() - 2.0 / 3.0).abs() < 1e-9);
}
