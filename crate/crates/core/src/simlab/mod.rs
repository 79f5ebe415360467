//! Simulation scenarios with common random numbers.
//!
//! Stream layout for replication `r` (key `replication_key(base_seed, r)`):
//! cluster `i` draws its random effect from counters `8i..8i+8`; the outcome
//! of observation `t` uses counter `8m + i·2^16 + t`. Cluster size and the
//! fitted families never enter the key, so every size and every fitted
//! family sees the same random effects, and shorter clusters see a prefix of
//! the outcome uniforms of longer ones.

pub(crate) mod config;
mod output;
mod summary;

pub use config::{split_top_level, CovariateScheme, ScenarioConfig, ALL_SIZES, SLOPE_TIMES};
pub use output::{
    format_medians, format_msep, format_summary, output_dir_name, write_outputs, OutputOptions,
};
pub use summary::{summarize, true_values, MsepRow, SummaryRow, SummaryTable};

use crate::error::{Error, Result};
use crate::fit::{fit, FitOptions, FitResult};
use crate::model::{Cluster, Dataset, ModelSpec, OutcomeFamily, RandomStructure};
use crate::optimize::Status;
use crate::par::{map_collect, ExecMode};
use crate::predict::{msep, predict, PredictMethod, PredictionSet};
use crate::ranef::{standardize, Effect, StandardizedRanef};
use crate::rng::{replication_key, CounterRng};
use crate::special::expit;

pub const RANEF_SLOTS: u64 = 8;
pub const MAX_CLUSTER_SIZE: u64 = 1 << 16;
/// Covariate draws of the cohort-like scheme live far above the other streams.
const COVARIATE_BASE: u64 = 1 << 62;

/// Covariate rows (no intercept) for every cluster.
pub fn gen_covariates(
    m: usize,
    n: usize,
    scheme: CovariateScheme,
    key: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if n as u64 >= MAX_CLUSTER_SIZE {
        return Err(Error::InvalidData(format!(
            "cluster size {n} exceeds {}",
            MAX_CLUSTER_SIZE - 1
        )));
    }
    match scheme {
        CovariateScheme::WithinBetween => {
            if n < 2 {
                return Err(Error::InvalidData(
                    "within_between needs cluster size >= 2".into(),
                ));
            }
            let n_between = (m as f64 * 0.25).ceil() as usize;
            Ok((0..m)
                .map(|i| {
                    let between = if i < n_between { 1.0 } else { 0.0 };
                    (0..n)
                        .map(|t| vec![between, t as f64 / (n - 1) as f64])
                        .collect()
                })
                .collect())
        }
        CovariateScheme::SlopesDesign => {
            if n != SLOPE_TIMES.len() {
                return Err(Error::InvalidData(format!(
                    "slopes_design has cluster size {}",
                    SLOPE_TIMES.len()
                )));
            }
            let half = m.div_ceil(2);
            Ok((0..m)
                .map(|i| {
                    let z = if i < half { 1.0 } else { 0.0 };
                    SLOPE_TIMES.iter().map(|&t| vec![z, t]).collect()
                })
                .collect())
        }
        CovariateScheme::HersLike => {
            let mut rng = CounterRng::new(key);
            Ok((0..m as u64)
                .map(|i| {
                    rng.seek(COVARIATE_BASE + 4 * i);
                    let bmi_mean = (28.0 + 5.0 * rng.normal()).max(16.0);
                    let mut htn = rng.uniform() < 0.45;
                    (0..n as u64)
                        .map(|t| {
                            rng.seek(COVARIATE_BASE + (1 << 60) + 4 * (i * MAX_CLUSTER_SIZE + t));
                            let bmi = ((bmi_mean + 1.15 * rng.normal()) * 10.0).round() / 10.0;
                            if t > 0 && !htn && rng.uniform() < 0.08 {
                                htn = true;
                            }
                            vec![t as f64, bmi, f64::from(u8::from(htn))]
                        })
                        .collect()
                })
                .collect())
        }
    }
}

fn true_distribution(config: &ScenarioConfig) -> Result<StandardizedRanef> {
    let scale = if config.true_family.family.is_bivariate() {
        1.0
    } else {
        config.sigma_b
    };
    standardize(&config.true_family.family, scale)
}

/// Simulated dataset for one cluster size and replication.
pub fn gen_dataset(
    config: &ScenarioConfig,
    cluster_size: usize,
    replication: usize,
) -> Result<Dataset> {
    let key = replication_key(config.base_seed, replication as u64);
    let mut rng = CounterRng::new(key);
    let dist = true_distribution(config)?;
    let m = config.m as u64;
    let effects: Vec<Effect> = (0..m)
        .map(|i| {
            rng.seek(RANEF_SLOTS * i);
            dist.sample(&mut rng)
        })
        .collect();
    let rows = gen_covariates(config.m, cluster_size, config.covariate_scheme, key)?;
    let slope_col = (config.covariate_scheme == CovariateScheme::SlopesDesign).then_some(1);
    let beta = &config.true_betas;
    let clusters = rows
        .into_iter()
        .zip(&effects)
        .enumerate()
        .map(|(i, (x, b))| {
            let y = x
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    let mut eta = beta[0] + b.intercept();
                    for (v, bj) in row.iter().zip(&beta[1..]) {
                        eta += v * bj;
                    }
                    if let Some(k) = slope_col {
                        eta += b.slope() * row[k];
                    }
                    let u =
                        rng.uniform_at(RANEF_SLOTS * m + i as u64 * MAX_CLUSTER_SIZE + t as u64);
                    if u < expit(eta) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Cluster {
                id: (i + 1).to_string(),
                y,
                x,
            }
        })
        .collect();
    Ok(Dataset {
        covariate_names: config.covariate_names(),
        clusters,
        true_ranef: Some(effects),
    })
}

/// The model fitted in a scenario for one fitted family.
pub fn scenario_model(config: &ScenarioConfig, family_index: usize) -> Result<ModelSpec> {
    let random = match config.covariate_scheme {
        CovariateScheme::SlopesDesign => RandomStructure::InterceptAndSlope { slope_covariate: 1 },
        _ => RandomStructure::InterceptOnly,
    };
    ModelSpec::new(
        OutcomeFamily::BernoulliLogit,
        config.covariate_names(),
        random,
        config.fitted_families[family_index].clone(),
    )
}

#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub replication: usize,
    pub cluster_size: usize,
    pub family_index: usize,
    /// Label of the fitted family, e.g. `tukey-fixed`.
    pub family: String,
    pub seed: u64,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Per component (intercept, slope).
    pub msep_mode: Vec<f64>,
    pub msep_mean: Vec<f64>,
    /// Structural failure of this replication, if any.
    pub error: Option<String>,
    /// Kept for replication 0 only.
    pub predictions: Option<[PredictionSet; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Desk-scale preset: `desk_replications` and no free-shape fits at
    /// `desk_skip_free_sizes`.
    pub desk: bool,
    pub exec: ExecMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            desk: false,
            exec: ExecMode::Parallel,
        }
    }
}

impl ScenarioConfig {
    pub fn effective_replications(&self, desk: bool) -> usize {
        if desk {
            self.desk_replications
        } else {
            self.n_replications
        }
    }

    /// Fitted families scheduled at a cluster size.
    pub fn families_at(&self, size: usize, desk: bool) -> Vec<usize> {
        (0..self.fitted_families.len())
            .filter(|&k| {
                !(desk
                    && self.desk_skip_free_sizes.contains(&size)
                    && self.fitted_families[k].n_free_shape() > 0)
            })
            .collect()
    }
}

fn one_fit(
    config: &ScenarioConfig,
    data: &Dataset,
    size: usize,
    rep: usize,
    k: usize,
) -> ReplicationResult {
    let seed = replication_key(config.base_seed, rep as u64);
    let label = config.fitted_families[k].label();
    let failed = |model: Option<&ModelSpec>, e: Error| ReplicationResult {
        replication: rep,
        cluster_size: size,
        family_index: k,
        family: label.clone(),
        seed,
        names: model.map(|m| m.param_names()).unwrap_or_default(),
        estimates: model
            .map(|m| vec![f64::NAN; m.n_params()])
            .unwrap_or_default(),
        std_errors: None,
        loglik: f64::NAN,
        converged: false,
        iterations: 0,
        msep_mode: vec![f64::NAN],
        msep_mean: vec![f64::NAN],
        error: Some(e.to_string()),
        predictions: None,
    };
    let model = match scenario_model(config, k) {
        Ok(m) => m,
        Err(e) => return failed(None, e),
    };
    let opts = FitOptions {
        quad: config.quad,
        ..FitOptions::default()
    };
    let f: FitResult = match fit(data, &model, &opts) {
        Ok(f) => f,
        Err(e) => return failed(Some(&model), e),
    };
    let score = |method| -> (Vec<f64>, Option<PredictionSet>) {
        match predict(data, &f, method, config.quad, ExecMode::Sequential) {
            Ok(p) => (msep(&p, None).unwrap_or_else(|_| vec![f64::NAN]), Some(p)),
            Err(_) => (vec![f64::NAN], None),
        }
    };
    let (msep_mode, p_mode) = score(PredictMethod::Mode);
    let (msep_mean, p_mean) = score(PredictMethod::Mean);
    let predictions = match (rep, p_mode, p_mean) {
        (0, Some(a), Some(b)) => Some([a, b]),
        _ => None,
    };
    ReplicationResult {
        replication: rep,
        cluster_size: size,
        family_index: k,
        family: label,
        seed,
        names: f.names,
        estimates: f.estimates,
        std_errors: f.std_errors,
        loglik: f.loglik,
        converged: f.converged && f.status == Status::Converged,
        iterations: f.iterations,
        msep_mode,
        msep_mean,
        error: None,
        predictions,
    }
}

/// Fit every scheduled family to every (cluster size, replication) dataset.
/// Results are ordered by (size as listed, replication, family as listed).
pub fn run_scenario(config: &ScenarioConfig, opts: RunOptions) -> Result<Vec<ReplicationResult>> {
    // surface configuration problems once instead of per replication
    true_distribution(config)?;
    for k in 0..config.fitted_families.len() {
        scenario_model(config, k)?;
    }
    let reps = config.effective_replications(opts.desk);
    let units: Vec<(usize, usize)> = config
        .cluster_sizes
        .iter()
        .flat_map(|&n| (0..reps).map(move |r| (n, r)))
        .collect();
    let per_unit = map_collect(opts.exec, &units, |&(n, r)| -> Vec<ReplicationResult> {
        match gen_dataset(config, n, r) {
            Ok(data) => config
                .families_at(n, opts.desk)
                .into_iter()
                .map(|k| one_fit(config, &data, n, r, k))
                .collect(),
            Err(e) => config
                .families_at(n, opts.desk)
                .into_iter()
                .map(|k| {
                    let mut res = one_fit_failure(config, n, r, k);
                    res.error = Some(e.to_string());
                    res
                })
                .collect(),
        }
    });
    Ok(per_unit.into_iter().flatten().collect())
}

fn one_fit_failure(
    config: &ScenarioConfig,
    size: usize,
    rep: usize,
    k: usize,
) -> ReplicationResult {
    ReplicationResult {
        replication: rep,
        cluster_size: size,
        family_index: k,
        family: config.fitted_families[k].label(),
        seed: replication_key(config.base_seed, rep as u64),
        names: Vec::new(),
        estimates: Vec::new(),
        std_errors: None,
        loglik: f64::NAN,
        converged: false,
        iterations: 0,
        msep_mode: vec![f64::NAN],
        msep_mean: vec![f64::NAN],
        error: None,
        predictions: None,
    }
}

/// Random intercepts and slopes: fits the bivariate normal model and
/// summarizes (medians, convergence) over replications.
pub fn run_slopes_scenario(
    config: &ScenarioConfig,
    opts: RunOptions,
) -> Result<(Vec<ReplicationResult>, SummaryTable)> {
    if config.covariate_scheme != CovariateScheme::SlopesDesign {
        return Err(Error::InvalidData(
            "slopes runs need covariate_scheme = slopes_design".into(),
        ));
    }
    let results = run_scenario(config, opts)?;
    let table = summarize(&results, &true_values(config), false);
    Ok((results, table))
}
