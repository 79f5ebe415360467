//! Acceptance run: one PASS/FAIL line per criterion, then a few invariants
//! measured on the same simulations. Exits non-zero when anything fails.
//!
//! The simulation criteria run at desk scale and take a while on one core
//! (roughly 25 minutes); set `MIXROBUST_ACCEPTANCE_SKIP_SLOW=1` to run only
//! the fast ones.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use mixrobust::asymptotics::{kl_limit, true_counterparts, LimitConfig};
use mixrobust::family_spec::parse_family_spec;
use mixrobust::fit::{fit, neutral_start, FitOptions, FitResult, Objective};
use mixrobust::io::format_dataset;
use mixrobust::likelihood::{total_loglik, QuadSettings};
use mixrobust::model::{Cluster, Dataset, ModelSpec, OutcomeFamily, ParamVector, RandomStructure};
use mixrobust::par::ExecMode;
use mixrobust::predict::{posterior_mean, posterior_mode, predict, PredictMethod};
use mixrobust::quadrature::gauss_hermite;
use mixrobust::ranef::RanefFamily;
use mixrobust::simlab::{
    gen_dataset, run_scenario, run_slopes_scenario, scenario_model, summarize, true_values,
    ReplicationResult, RunOptions, ScenarioConfig, SummaryTable,
};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, ok: bool, detail: String, started: Instant) {
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} [{id}] {title}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
}

fn config_text(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Bundled config with some `key = value` lines replaced.
fn scenario(name: &str, overrides: &[(&str, &str)]) -> ScenarioConfig {
    let mut lines: Vec<String> = config_text(name).lines().map(String::from).collect();
    for (key, value) in overrides {
        let new = format!("{key} = {value}");
        match lines
            .iter_mut()
            .find(|l| l.split('=').next().map(str::trim) == Some(key))
        {
            Some(l) => *l = new,
            None => lines.push(new),
        }
    }
    ScenarioConfig::parse(&lines.join("\n")).unwrap()
}

fn desk() -> RunOptions {
    RunOptions {
        desk: true,
        ..RunOptions::default()
    }
}

fn intercept_model(outcome: OutcomeFamily, covs: &[&str], family: &str) -> ModelSpec {
    ModelSpec::new(
        outcome,
        covs.iter().map(|s| s.to_string()).collect(),
        RandomStructure::InterceptOnly,
        parse_family_spec(family).unwrap(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- [1]

fn tukey_moments(r: &mut Report) {
    let t = Instant::now();
    let fam = parse_family_spec("tukey(g=0.5,h=0.1)").unwrap().family;
    let got = fam.moment_summary().unwrap();
    let want = [0.31, 2.27, 3.41, 44.24];
    let ok = got
        .iter()
        .zip(want)
        .all(|(g, w)| ((g * 100.0).round() / 100.0 - w).abs() < 1e-9)
        && t.elapsed().as_secs_f64() < 1.0;
    r.line(
        "1",
        "Tukey(0.5,0.1) moments",
        ok,
        format!(
            "mean {:.4} variance {:.4} skewness {:.4} kurtosis {:.4} (want 0.31 2.27 3.41 44.24)",
            got[0], got[1], got[2], got[3]
        ),
        t,
    );
}

// ---------------------------------------------------------- [2] [3] [4]

const SIZES: [usize; 3] = [2, 10, 40];

fn stat(table: &SummaryTable, size: usize, family: &str, param: &str) -> (f64, f64) {
    let row = table
        .row(size, family, param)
        .unwrap_or_else(|| panic!("{size} {family} {param}"));
    (row.bias, row.sd)
}

fn bias_pattern(r: &mut Report, table: &SummaryTable, t: Instant) {
    let mut ok = true;
    let mut detail = Vec::new();
    for n in SIZES {
        for fam in ["normal", "tukey-fixed"] {
            let w = stat(table, n, fam, "within").0;
            ok &= w.abs() < 0.05;
            detail.push(format!("n={n} {fam} within {w:+.3}"));
        }
        let b = stat(table, n, "normal", "between").0;
        let i = stat(table, n, "normal", "intercept").0;
        ok &= b.abs() < 0.12 && i.abs() < 0.30;
        detail.push(format!("normal between {b:+.3} intercept {i:+.3}"));
    }
    r.line("2", "bias pattern, 200 reps", ok, detail.join("; "), t);
}

fn efficiency(r: &mut Report, table: &SummaryTable, t: Instant) {
    let mut ok = true;
    let mut worst = Vec::new();
    for n in SIZES {
        for p in ["intercept", "between", "within", "log_sigma_b"] {
            let ratio = stat(table, n, "normal", p).1 / stat(table, n, "tukey-fixed", p).1;
            let pass = if n == 40 && p == "between" {
                (0.85..=1.40).contains(&ratio)
            } else {
                (ratio - 1.0).abs() <= 0.15
            };
            ok &= pass;
            worst.push(format!(
                "n={n} {p} {ratio:.3}{}",
                if pass { "" } else { " (out)" }
            ));
        }
    }
    r.line("3", "SD ratio normal/tukey-fixed", ok, worst.join("; "), t);
}

fn msep_excess(r: &mut Report, table: &SummaryTable, t: Instant) {
    let excess = |n: usize| {
        table.msep_of(n, "normal", "mode", "b0").unwrap()
            / table.msep_of(n, "tukey-fixed", "mode", "b0").unwrap()
            - 1.0
    };
    let (e2, e40) = (excess(2), excess(40));
    let ok = (-0.05..=0.35).contains(&e2) && (0.05..=0.35).contains(&e40);
    r.line(
        "4",
        "MSEP excess of the normal fit",
        ok,
        format!(
            "n=2 {:+.1}%, n=10 {:+.1}%, n=40 {:+.1}%",
            100.0 * e2,
            100.0 * excess(10),
            100.0 * e40
        ),
        t,
    );
}

/// |loglik(Q=25) - loglik(Q=50)| at every fitted estimate.
fn quadrature_stability(r: &mut Report, config: &ScenarioConfig, results: &[ReplicationResult]) {
    let t = Instant::now();
    let mut data: HashMap<(usize, usize), Dataset> = HashMap::new();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    for res in results.iter().filter(|res| res.error.is_none()) {
        let d = data
            .entry((res.cluster_size, res.replication))
            .or_insert_with(|| gen_dataset(config, res.cluster_size, res.replication).unwrap());
        let model = scenario_model(config, res.family_index).unwrap();
        let at = |points: usize| {
            let quad = QuadSettings {
                points,
                ..QuadSettings::default()
            };
            Objective::new(d, &model, quad)
                .unwrap()
                .loglik(&res.estimates)
        };
        let diff = (at(25) - at(50)).abs();
        let diff = if diff.is_nan() { f64::INFINITY } else { diff };
        if diff > worst {
            worst = diff;
            worst_at = format!(
                "n={} {} rep {}",
                res.cluster_size, res.family, res.replication
            );
        }
        checked += 1;
    }
    r.line(
        "inv",
        "quadrature stability Q=25 vs Q=50",
        worst < 1e-4,
        format!("max |diff| {worst:.2e} over {checked} fits ({worst_at})"),
        t,
    );
}

fn simulation_criteria(r: &mut Report) {
    let t = Instant::now();
    let config = scenario(
        "sec9_tukey.cfg",
        &[("fitted_families", "normal, tukey(g=0.5,h=0.1)")],
    );
    let results = run_scenario(&config, desk()).unwrap();
    let table = summarize(&results, &true_values(&config), false);
    bias_pattern(r, &table, t);
    efficiency(r, &table, t);
    msep_excess(r, &table, t);
    quadrature_stability(r, &config, &results);
}

fn free_tukey_convergence(r: &mut Report) {
    let t = Instant::now();
    let config = scenario(
        "sec9_tukey.cfg",
        &[
            ("fitted_families", "tukey(free)"),
            ("cluster_sizes", "10, 40"),
            ("desk_replications", "50"),
        ],
    );
    let results = run_scenario(&config, desk()).unwrap();
    let table = summarize(&results, &true_values(&config), false);
    let rates: Vec<f64> = [10, 40]
        .iter()
        .map(|&n| {
            table
                .row(n, "tukey-free", "intercept")
                .map_or(0.0, |row| row.convergence_rate)
        })
        .collect();
    r.line(
        "inv",
        "free Tukey convergence at n >= 10 (50 reps)",
        rates.iter().all(|&c| c >= 0.80),
        format!(
            "n=10 {:.0}%, n=40 {:.0}%",
            100.0 * rates[0],
            100.0 * rates[1]
        ),
        t,
    );
}

// ---------------------------------------------------------------- [5]

fn slopes_medians(r: &mut Report) {
    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    type Check = fn(&[f64; 3]) -> bool;
    let cases: [(&str, f64, Check); 3] = [
        ("table2_normal.cfg", 0.90, |m| {
            m.iter()
                .zip([-6.26, 2.13, 1.07])
                .all(|(a, b)| (a - b).abs() <= 0.35)
        }),
        ("table2_mixture.cfg", 0.0, |m| {
            (2.4..=3.2).contains(&m[1]) && (0.65..=1.05).contains(&m[2])
        }),
        ("table2_mixture_smallvar.cfg", 0.95, |m| {
            m.iter()
                .zip([-5.89, 2.26, 0.95])
                .all(|(a, b)| (a - b).abs() <= 0.35)
        }),
    ];
    for (file, min_conv, check) in cases {
        let config = scenario(file, &[]);
        let (_, table) = run_slopes_scenario(&config, desk()).unwrap();
        let size = config.cluster_sizes[0];
        let med = ["intercept", "z", "t"].map(|p| table.row(size, "bvnormal", p).unwrap().median);
        let conv = table
            .row(size, "bvnormal", "intercept")
            .unwrap()
            .convergence_rate;
        let pass = check(&med) && conv >= min_conv;
        ok &= pass;
        detail.push(format!(
            "{file}: medians ({:.2}, {:.2}, {:.2}) convergence {:.0}%{}",
            med[0],
            med[1],
            med[2],
            100.0 * conv,
            if pass { "" } else { " (out)" }
        ));
    }
    r.line(
        "5",
        "random-slope medians, 100 reps",
        ok,
        detail.join("; "),
        t,
    );
}

// ---------------------------------------------------------------- [6]

fn kl_limits(r: &mut Report) {
    let t = Instant::now();
    let text = config_text("kl_tukey_n4.cfg");
    let null = LimitConfig::parse(&text).unwrap().problem().unwrap();
    let lim = kl_limit(&null, None).unwrap();
    let off_zero = lim.estimates[1].abs().max(lim.estimates[2].abs());

    let mut recover: f64 = 0.0;
    for family in ["normal", "tukey(g=0.5,h=0.1)"] {
        let wellspec = text
            .replace("true_betas = -2.5, 0, 0", "true_betas = -2.5, 2, 1")
            .replace(
                "true_family = tukey(g=0.5,h=0.1)",
                &format!("true_family = {family}"),
            )
            .replace(
                "assumed_family = normal",
                &format!("assumed_family = {family}"),
            );
        let p = LimitConfig::parse(&wellspec).unwrap().problem().unwrap();
        // start away from the truth so recovery is not by construction
        let l = kl_limit(&p, Some(&neutral_start(&p.assumed))).unwrap();
        for (e, truth) in l.estimates.iter().zip(true_counterparts(&p)) {
            recover = recover.max((e - truth).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "6",
        "KL limits",
        off_zero < 1e-4 && recover < 1e-4 && secs < 30.0,
        format!("null covariate limits within {off_zero:.1e} of 0; well-specified max error {recover:.1e}"),
        t,
    );
}

// ---------------------------------------------------------------- [7]

fn compound_symmetry_check() -> f64 {
    let clusters: Vec<Cluster> = (0..9)
        .map(|c| {
            let n = 1 + c % 5;
            Cluster {
                id: format!("c{c}"),
                y: (0..n)
                    .map(|t| ((c * 3 + t * 5) % 11) as f64 * 0.3 - 1.2)
                    .collect(),
                x: (0..n)
                    .map(|t| vec![(t as f64 - 1.0) * 0.7, (c % 2) as f64])
                    .collect(),
            }
        })
        .collect();
    let data = Dataset {
        covariate_names: vec!["a".into(), "b".into()],
        clusters,
        true_ranef: None,
    };
    let m = intercept_model(OutcomeFamily::GaussianIdentity, &["a", "b"], "normal");
    let mut worst: f64 = 0.0;
    for v in [
        [0.3, -0.5, 1.1, 0.2, -0.4],
        [-1.0, 0.8, 0.0, -1.0, 0.5],
        [2.0, 0.1, -0.7, 0.9, -0.1],
    ] {
        let theta = ParamVector::from_vec(&m, &v).unwrap();
        let got = total_loglik(&data, &m, &theta, QuadSettings::default()).unwrap();
        let (vb, ve) = ((2.0 * v[3]).exp(), (2.0 * v[4]).exp());
        let want: f64 = data
            .clusters
            .iter()
            .map(|c| {
                let n = c.y.len() as f64;
                let r: Vec<f64> =
                    c.x.iter()
                        .zip(&c.y)
                        .map(|(x, y)| y - v[0] - v[1] * x[0] - v[2] * x[1])
                        .collect();
                let s: f64 = r.iter().sum();
                let ss: f64 = r.iter().map(|e| e * e).sum();
                let logdet = (n - 1.0) * ve.ln() + (ve + n * vb).ln();
                let quad = (ss - vb * s * s / (ve + n * vb)) / ve;
                -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
            })
            .sum();
        worst = worst.max((got - want).abs());
    }
    worst
}

fn two_group_check() -> f64 {
    let mut clusters = Vec::new();
    let mut sums = [0.0, 0.0];
    for c in 0..8 {
        let g = c % 2;
        let y: Vec<f64> = (0..4)
            .map(|t| 0.5 + 1.7 * g as f64 + 0.25 * ((c * 5 + t * 3) % 7) as f64)
            .collect();
        sums[g] += y.iter().sum::<f64>();
        clusters.push(Cluster {
            id: format!("c{c}"),
            x: vec![vec![g as f64]; 4],
            y,
        });
    }
    let data = Dataset {
        covariate_names: vec!["group".into()],
        clusters,
        true_ranef: None,
    };
    let m = intercept_model(OutcomeFamily::GaussianIdentity, &["group"], "normal");
    let f = fit(&data, &m, &FitOptions::default()).unwrap();
    (f.estimate("group").unwrap() - (sums[1] - sums[0]) / 16.0).abs()
}

fn log_expit(eta: f64) -> f64 {
    -(if eta > 0.0 {
        (-eta).exp().ln_1p()
    } else {
        -eta + eta.exp().ln_1p()
    })
}

/// Brute-force posterior mode and mean of the intercept on a fine z grid.
fn dense_posterior(cluster: &Cluster, fit: &FitResult) -> (f64, f64) {
    let beta = &fit.theta.beta;
    let sigma = fit.theta.log_sigma_b.unwrap().exp();
    let raw: Box<dyn Fn(f64) -> f64> = match fit.model.ranef.family {
        RanefFamily::TukeyGH { g, h } => {
            Box::new(move |z: f64| ((g * z).exp() - 1.0) / g * (h * z * z / 2.0).exp())
        }
        _ => Box::new(|z: f64| z),
    };
    let step = 2e-4;
    let grid: Vec<f64> = (0..=120_000).map(|k| -12.0 + step * k as f64).collect();
    let phi = |z: f64| (-z * z / 2.0).exp();
    // standardization of the raw map, by the same grid
    let norm: f64 = grid.iter().map(|&z| phi(z)).sum();
    let mu = grid.iter().map(|&z| phi(z) * raw(z)).sum::<f64>() / norm;
    let var = grid
        .iter()
        .map(|&z| phi(z) * (raw(z) - mu).powi(2))
        .sum::<f64>()
        / norm;
    let b = |z: f64| sigma * (raw(z) - mu) / var.sqrt();
    let log_post = |z: f64| {
        -z * z / 2.0
            + cluster
                .x
                .iter()
                .zip(&cluster.y)
                .map(|(x, &y)| {
                    let eta =
                        beta[0] + x.iter().zip(&beta[1..]).map(|(a, c)| a * c).sum::<f64>() + b(z);
                    if y > 0.5 {
                        log_expit(eta)
                    } else {
                        log_expit(-eta)
                    }
                })
                .sum::<f64>()
    };
    let lp: Vec<f64> = grid.iter().map(|&z| log_post(z)).collect();
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - top).exp()).collect();
    let mean = grid.iter().zip(&w).map(|(&z, w)| w * b(z)).sum::<f64>() / w.iter().sum::<f64>();
    let k = lp.iter().position(|&v| v == top).unwrap();
    let (mut lo, mut hi) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-12 {
        let (a, c) = (hi - gr * (hi - lo), lo + gr * (hi - lo));
        if log_post(a) > log_post(c) {
            hi = c;
        } else {
            lo = a;
        }
    }
    (b((lo + hi) / 2.0), mean)
}

fn posterior_check() -> f64 {
    let config = scenario("sec9_tukey.cfg", &[("m", "120")]);
    let mut worst: f64 = 0.0;
    for (family, size) in [
        ("normal", 2),
        ("normal", 3),
        ("tukey(g=0.5,h=0.1)", 3),
        ("tukey(g=0.5,h=0.1)", 2),
    ] {
        let data = gen_dataset(&config, size, 0).unwrap();
        let m = intercept_model(
            OutcomeFamily::BernoulliLogit,
            &["between", "within"],
            family,
        );
        let f = fit(&data, &m, &FitOptions::default()).unwrap();
        for c in data.clusters.iter().take(12) {
            let (mode, mean) = dense_posterior(c, &f);
            let got_mode = posterior_mode(c, &data.covariate_names, &f)
                .unwrap()
                .intercept();
            let got_mean = posterior_mean(c, &data.covariate_names, &f, QuadSettings::default())
                .unwrap()
                .intercept();
            worst = worst
                .max((mode - got_mode).abs())
                .max((mean - got_mean).abs());
        }
    }
    worst
}

fn gauss_hermite_check() -> bool {
    (1..=50).all(|q| {
        let rule = gauss_hermite(q).unwrap();
        // E[z^k] = (k-1)!! for even k
        let moment = |k: usize| -> f64 { (1..k).step_by(2).map(|v| v as f64).product() };
        (0..2 * q).all(|k| {
            let want = if k % 2 == 1 { 0.0 } else { moment(k) };
            // odd powers cancel between symmetric nodes; scale by the next even moment
            (rule.integrate(|z| z.powi(k as i32)) - want).abs() <= 1e-10 * moment(k + k % 2)
        })
    })
}

fn common_random_numbers_check() -> bool {
    let one = scenario("sec9_tukey.cfg", &[("fitted_families", "normal")]);
    let many = scenario(
        "sec9_tukey.cfg",
        &[("fitted_families", "tukey(free), normal, exp, discrete(k=3)")],
    );
    let mut ok = true;
    for rep in 0..3 {
        for n in SIZES {
            let a = format_dataset(&gen_dataset(&one, n, rep).unwrap());
            let b = format_dataset(&gen_dataset(&many, n, rep).unwrap());
            ok &= a.as_bytes() == b.as_bytes();
        }
        let small = gen_dataset(&one, 2, rep).unwrap().true_ranef;
        let large = gen_dataset(&one, 40, rep).unwrap().true_ranef;
        ok &= small.is_some() && small == large;
    }
    // and the fitted arms of a run really see that data
    let runs = run_scenario(
        &scenario(
            "sec9_tukey.cfg",
            &[
                ("fitted_families", "normal, normal"),
                ("cluster_sizes", "2"),
                ("desk_replications", "2"),
            ],
        ),
        desk(),
    )
    .unwrap();
    for pair in runs.chunks(2) {
        ok &= pair[0].estimates == pair[1].estimates && pair[0].seed == pair[1].seed;
    }
    ok
}

fn oracle_equivalences(r: &mut Report) {
    let t = Instant::now();
    let cs = compound_symmetry_check();
    let tg = two_group_check();
    let post = posterior_check();
    let gh = gauss_hermite_check();
    let crn = common_random_numbers_check();
    r.line(
        "7",
        "oracle equivalences",
        cs < 1e-8 && tg < 1e-6 && post < 1e-6 && gh && crn,
        format!(
            "(a) compound symmetry {cs:.1e}; (b) group difference {tg:.1e}; (c) posterior vs dense grid {post:.1e}; \
             (d) Gauss-Hermite exactness {gh}; (e) common random numbers {crn}"
        ),
        t,
    );
}

// ---------------------------------------------------------------- [8]

fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

fn shape_sensitivity(r: &mut Report) {
    let t = Instant::now();
    let config = scenario("hers_synthetic.cfg", &[]);
    let data = gen_dataset(&config, config.cluster_sizes[0], 0).unwrap();
    let covs = ["visit", "bmi", "htn"];
    let fits: Vec<FitResult> = ["normal", "exp"]
        .iter()
        .map(|fam| {
            fit(
                &data,
                &intercept_model(OutcomeFamily::BernoulliLogit, &covs, fam),
                &FitOptions::default(),
            )
            .unwrap()
        })
        .collect();
    let skews: Vec<f64> = fits
        .iter()
        .map(|f| {
            let p = predict(
                &data,
                f,
                PredictMethod::Mode,
                QuadSettings::default(),
                ExecMode::Parallel,
            )
            .unwrap();
            skewness(&p.intercepts())
        })
        .collect();
    let gap = (fits[0].estimate("visit").unwrap() - fits[1].estimate("visit").unwrap()).abs();
    let se = fits
        .iter()
        .map(|f| f.std_error("visit").unwrap_or(f64::NAN))
        .fold(f64::INFINITY, f64::min);
    let ok = fits.iter().all(|f| f.converged) && (skews[0] - skews[1]).abs() > 0.5 && gap < se;
    r.line(
        "8",
        "shape sensitivity, synthetic cohort",
        ok,
        format!(
            "prediction skewness normal {:.2} vs exp {:.2}; visit estimates differ by {gap:.4}, smaller SE {se:.4}",
            skews[0], skews[1]
        ),
        t,
    );
}

fn main() -> ExitCode {
    let slow = std::env::var("MIXROBUST_ACCEPTANCE_SKIP_SLOW").map_or(true, |v| v != "1");
    let mut r = Report { failures: 0 };
    tukey_moments(&mut r);
    kl_limits(&mut r);
    oracle_equivalences(&mut r);
    if slow {
        simulation_criteria(&mut r);
        slopes_medians(&mut r);
        shape_sensitivity(&mut r);
        free_tukey_convergence(&mut r);
    } else {
        println!("SKIP [2] [3] [4] [5] [8] and simulation invariants");
    }
    if r.failures == 0 {
        println!("acceptance: all checks passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} check(s) failed", r.failures);
        ExitCode::FAILURE
    }
}
