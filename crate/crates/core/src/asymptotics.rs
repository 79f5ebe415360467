//! Large-sample limits of misspecified maximum likelihood for binary
//! clustered data.
//!
//! As the number of clusters grows the MLE under an assumed random-effects
//! family converges to the maximizer of the expected log-likelihood under the
//! true model. With at most 12 observations per cluster the expectation is an
//! exact sum over the 2^n outcome patterns of each design archetype.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::family_spec::{parse_family_spec, RanefSpec};
use crate::fit::Objective;
use crate::likelihood::{AdaptiveMode, Evaluator, Integrator, Prepared, QuadSettings};
use crate::model::{Cluster, Dataset, ModelSpec, OutcomeFamily, ParamVector, RandomStructure};
use crate::optimize::{bfgs_fd, OptimizeOptions, Status};
use crate::simlab::config::{cfg_err, normalize, parse_entries, split_top_level};

pub const MAX_PATTERN_LENGTH: usize = 12;

/// One cluster design (covariate rows, intercept excluded) and its share of
/// the population.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub rows: Vec<Vec<f64>>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitProblem {
    pub covariate_names: Vec<String>,
    pub archetypes: Vec<Archetype>,
    pub true_model: ModelSpec,
    pub true_theta: ParamVector,
    pub assumed: ModelSpec,
    pub quad: QuadSettings,
}

impl LimitProblem {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::InvalidData("no design archetypes".into()));
        }
        let total: f64 = self.archetypes.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-12 || self.archetypes.iter().any(|a| !(a.prob >= 0.0)) {
            return Err(Error::InvalidData(format!(
                "archetype probabilities sum to {total}, not 1"
            )));
        }
        for a in &self.archetypes {
            if a.rows.is_empty() || a.rows.len() > MAX_PATTERN_LENGTH {
                return Err(Error::InvalidData(format!(
                    "archetype with {} observations (1..={MAX_PATTERN_LENGTH})",
                    a.rows.len()
                )));
            }
            if a.rows.iter().any(|r| r.len() != self.covariate_names.len()) {
                return Err(Error::Dimension(
                    "archetype row length differs from covariate count".into(),
                ));
            }
        }
        for m in [&self.true_model, &self.assumed] {
            if m.outcome != OutcomeFamily::BernoulliLogit {
                return Err(Error::InvalidData(
                    "limits are computed for binary outcomes".into(),
                ));
            }
            if m.covariate_names != self.covariate_names {
                return Err(Error::Dimension(
                    "model covariates differ from the design".into(),
                ));
            }
        }
        Ok(())
    }

    /// Every outcome pattern of every archetype as a cluster, archetype-major,
    /// patterns in binary counting order (bit t is observation t).
    pub fn pattern_dataset(&self) -> Dataset {
        let mut clusters = Vec::new();
        for (k, a) in self.archetypes.iter().enumerate() {
            let n = a.rows.len();
            for bitsv in 0..(1usize << n) {
                clusters.push(Cluster {
                    id: format!("{k}:{bitsv}"),
                    y: (0..n).map(|t| ((bitsv >> t) & 1) as f64).collect(),
                    x: a.rows.clone(),
                });
            }
        }
        Dataset {
            covariate_names: self.covariate_names.clone(),
            clusters,
            true_ranef: None,
        }
    }

    fn pattern_archetype_probs(&self) -> Vec<f64> {
        self.archetypes
            .iter()
            .flat_map(|a| std::iter::repeat(a.prob).take(1 << a.rows.len()))
            .collect()
    }
}

/// Log probability of every outcome pattern (order of `pattern_dataset`).
pub fn pattern_log_probs(
    problem: &LimitProblem,
    model: &ModelSpec,
    theta: &ParamVector,
) -> Result<Vec<f64>> {
    let data = problem.pattern_dataset();
    let prep = Prepared::new(&data, model)?;
    let integ = Integrator::new(problem.quad)?;
    let ev = Evaluator::new(&prep, &integ, model, theta)?;
    Ok(ev.cluster_logliks())
}

/// Pattern weights `p_a · P_true(y | a)`.
fn true_weights(problem: &LimitProblem) -> Result<Vec<f64>> {
    let lp = pattern_log_probs(problem, &problem.true_model, &problem.true_theta)?;
    Ok(lp
        .iter()
        .zip(problem.pattern_archetype_probs())
        .map(|(l, p)| p * l.exp())
        .collect())
}

fn weighted_sum(weights: &[f64], logp: &[f64]) -> f64 {
    let mut s = crate::special::NeumaierSum::default();
    for (w, l) in weights.iter().zip(logp) {
        if *w > 0.0 {
            s.add(w * l);
        }
    }
    s.value()
}

/// Expected per-cluster log-likelihood of the assumed model at `theta` under
/// the true model.
pub fn expected_loglik(theta: &ParamVector, problem: &LimitProblem) -> Result<f64> {
    problem.validate()?;
    let w = true_weights(problem)?;
    let lp = pattern_log_probs(problem, &problem.assumed, theta)?;
    Ok(weighted_sum(&w, &lp))
}

/// Expected log-likelihood of the true model at its own parameters
/// (the negative entropy of the outcome-pattern distribution).
pub fn true_expected_loglik(problem: &LimitProblem) -> Result<f64> {
    problem.validate()?;
    let w = true_weights(problem)?;
    let lp = pattern_log_probs(problem, &problem.true_model, &problem.true_theta)?;
    Ok(weighted_sum(&w, &lp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitResult {
    pub names: Vec<String>,
    pub theta: ParamVector,
    pub estimates: Vec<f64>,
    pub expected_loglik: f64,
    pub status: Status,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Maximizer of the expected log-likelihood over the assumed model.
pub fn kl_limit(problem: &LimitProblem, start: Option<&[f64]>) -> Result<LimitResult> {
    problem.validate()?;
    let w = true_weights(problem)?;
    let data = problem.pattern_dataset();
    let obj = Objective::new(&data, &problem.assumed, problem.quad)?;
    let x0 = match start {
        Some(s) if s.len() == problem.assumed.n_params() => s.to_vec(),
        Some(s) => {
            return Err(Error::Dimension(format!(
                "start of length {} for {} parameters",
                s.len(),
                problem.assumed.n_params()
            )))
        }
        None => default_start(problem),
    };
    let target = |v: &[f64]| -> f64 {
        let Ok(theta) = ParamVector::from_vec(obj.model, v) else {
            return f64::INFINITY;
        };
        let Ok(ev) = Evaluator::new(&obj.prep, &obj.integ, obj.model, &theta) else {
            return f64::INFINITY;
        };
        let v = -weighted_sum(&w, &ev.cluster_logliks());
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let opts = OptimizeOptions {
        g_tol: 1e-9,
        f_tol: 1e-15,
        max_iters: 2000,
        ..OptimizeOptions::default()
    };
    let r = bfgs_fd(target, &x0, &opts);
    Ok(LimitResult {
        names: problem.assumed.param_names(),
        theta: ParamVector::from_vec(&problem.assumed, &r.x)?,
        estimates: r.x,
        expected_loglik: -r.f,
        status: r.status,
        iterations: r.iterations,
        gradient_norm: r.gradient_norm,
    })
}

/// True values for the assumed model's parameters where they have a
/// counterpart in the true model (NaN otherwise).
pub fn true_counterparts(problem: &LimitProblem) -> Vec<f64> {
    let true_names = problem.true_model.param_names();
    let true_vals = problem.true_theta.to_vec();
    problem
        .assumed
        .param_names()
        .iter()
        .map(|n| {
            true_names
                .iter()
                .position(|t| t == n)
                .map_or(f64::NAN, |j| true_vals[j])
        })
        .collect()
}

fn default_start(problem: &LimitProblem) -> Vec<f64> {
    let truth = true_counterparts(problem);
    let mut start = crate::fit::neutral_start(&problem.assumed);
    for (s, t) in start.iter_mut().zip(&truth) {
        if t.is_finite() {
            *s = *t;
        }
    }
    start
}

/// Asymptotics config: a within/between design of one cluster size.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitConfig {
    pub cluster_size: usize,
    /// Share of clusters with the between-cluster covariate at 1.
    pub between_fraction: f64,
    pub true_betas: Vec<f64>,
    pub sigma_b: f64,
    pub true_family: RanefSpec,
    pub assumed_family: RanefSpec,
    pub true_family_text: String,
    pub assumed_family_text: String,
    pub base_seed: u64,
    pub quad: QuadSettings,
}

const LIMIT_KEYS: [&str; 9] = [
    "cluster_size",
    "between_fraction",
    "true_betas",
    "sigma_b",
    "true_family",
    "assumed_family",
    "base_seed",
    "quad_points",
    "quad_adaptive",
];

impl LimitConfig {
    pub fn parse(text: &str) -> Result<LimitConfig> {
        let entries = parse_entries(text, &LIMIT_KEYS)?;
        let required = |k: &str| {
            entries
                .get(k)
                .ok_or_else(|| Error::MissingKey(k.to_string()))
        };
        let size_entry = required("cluster_size")?;
        let cluster_size: usize = size_entry.value.parse().map_err(|_| {
            cfg_err(
                size_entry.line,
                format!(
                    "`cluster_size` expects an integer, got `{}`",
                    size_entry.value
                ),
            )
        })?;
        if !(2..=MAX_PATTERN_LENGTH).contains(&cluster_size) {
            return Err(cfg_err(
                size_entry.line,
                format!("cluster_size must be in 2..={MAX_PATTERN_LENGTH}"),
            ));
        }
        let betas_entry = required("true_betas")?;
        let true_betas: Vec<f64> = split_top_level(&betas_entry.value)
            .iter()
            .map(|v| {
                v.parse().map_err(|_| {
                    cfg_err(
                        betas_entry.line,
                        format!("`true_betas` expects numbers, got `{v}`"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if true_betas.len() != 3 {
            return Err(cfg_err(
                betas_entry.line,
                "true_betas needs intercept, between, within",
            ));
        }
        let family = |key: &str| -> Result<(RanefSpec, String)> {
            let e = required(key)?;
            let spec =
                parse_family_spec(&e.value).map_err(|err| cfg_err(e.line, err.to_string()))?;
            if spec.family.is_bivariate() {
                return Err(cfg_err(e.line, "limits use scalar random intercepts"));
            }
            Ok((spec, normalize(&e.value)))
        };
        let (true_family, true_family_text) = family("true_family")?;
        if true_family.n_free_shape() > 0 {
            return Err(cfg_err(
                required("true_family")?.line,
                "the true family needs fixed shape values",
            ));
        }
        let (assumed_family, assumed_family_text) = family("assumed_family")?;
        let real = |key: &str, default: f64| -> Result<f64> {
            match entries.get(key) {
                Some(e) => e.value.parse().map_err(|_| {
                    cfg_err(
                        e.line,
                        format!("`{key}` expects a number, got `{}`", e.value),
                    )
                }),
                None => Ok(default),
            }
        };
        let sigma_b = real("sigma_b", 1.0)?;
        if !(sigma_b > 0.0 && sigma_b.is_finite()) {
            return Err(cfg_err(
                entries.get("sigma_b").map_or(0, |e| e.line),
                "sigma_b must be positive",
            ));
        }
        let between_fraction = real("between_fraction", 0.25)?;
        if !(0.0..=1.0).contains(&between_fraction) {
            return Err(cfg_err(
                entries.get("between_fraction").map_or(0, |e| e.line),
                "between_fraction must be in [0, 1]",
            ));
        }
        let base_seed = match entries.get("base_seed") {
            Some(e) => e.value.parse().map_err(|_| {
                cfg_err(
                    e.line,
                    format!("`base_seed` expects an unsigned integer, got `{}`", e.value),
                )
            })?,
            None => 1,
        };
        let defaults = QuadSettings::default();
        let points = match entries.get("quad_points") {
            Some(e) => match e.value.parse::<usize>() {
                Ok(v) if v > 0 => v,
                _ => return Err(cfg_err(e.line, "quad_points expects a positive integer")),
            },
            None => defaults.points,
        };
        let adaptive = match entries.get("quad_adaptive") {
            None => defaults.adaptive,
            Some(e) => match e.value.to_lowercase().as_str() {
                "auto" => AdaptiveMode::Auto,
                "on" | "true" | "yes" => AdaptiveMode::On,
                "off" | "false" | "no" => AdaptiveMode::Off,
                other => {
                    return Err(cfg_err(
                        e.line,
                        format!("quad_adaptive expects auto|on|off, got `{other}`"),
                    ))
                }
            },
        };
        Ok(LimitConfig {
            cluster_size,
            between_fraction,
            true_betas,
            sigma_b,
            true_family,
            assumed_family,
            true_family_text,
            assumed_family_text,
            base_seed,
            quad: QuadSettings {
                points,
                adaptive,
                ..defaults
            },
        })
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cluster_size = {}", self.cluster_size);
        let _ = writeln!(s, "between_fraction = {:?}", self.between_fraction);
        let betas: Vec<String> = self.true_betas.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "true_betas = {}", betas.join(", "));
        let _ = writeln!(s, "sigma_b = {:?}", self.sigma_b);
        let _ = writeln!(s, "true_family = {}", self.true_family_text);
        let _ = writeln!(s, "assumed_family = {}", self.assumed_family_text);
        let _ = writeln!(s, "base_seed = {}", self.base_seed);
        let _ = writeln!(s, "quad_points = {}", self.quad.points);
        let _ = writeln!(
            s,
            "quad_adaptive = {}",
            match self.quad.adaptive {
                AdaptiveMode::Auto => "auto",
                AdaptiveMode::On => "on",
                AdaptiveMode::Off => "off",
            }
        );
        s
    }

    pub fn problem(&self) -> Result<LimitProblem> {
        let n = self.cluster_size;
        let names = vec!["between".to_string(), "within".to_string()];
        let rows = |between: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|t| vec![between, t as f64 / (n - 1) as f64])
                .collect()
        };
        let mut archetypes = Vec::new();
        if self.between_fraction > 0.0 {
            archetypes.push(Archetype {
                rows: rows(1.0),
                prob: self.between_fraction,
            });
        }
        if self.between_fraction < 1.0 {
            archetypes.push(Archetype {
                rows: rows(0.0),
                prob: 1.0 - self.between_fraction,
            });
        }
        let spec = |r: &RanefSpec| {
            ModelSpec::new(
                OutcomeFamily::BernoulliLogit,
                names.clone(),
                RandomStructure::InterceptOnly,
                r.clone(),
            )
        };
        let true_model = spec(&self.true_family)?;
        let mut tv = self.true_betas.clone();
        tv.push(self.sigma_b.ln());
        let true_theta = ParamVector::from_vec(&true_model, &tv)?;
        Ok(LimitProblem {
            covariate_names: names.clone(),
            archetypes,
            true_model,
            true_theta,
            assumed: spec(&self.assumed_family)?,
            quad: self.quad,
        })
    }
}

/// `parameter,true_value,limit_value,abs_bias`.
pub fn format_theta_star(problem: &LimitProblem, limit: &LimitResult) -> String {
    let truth = true_counterparts(problem);
    let mut s = String::from("parameter,true_value,limit_value,abs_bias\n");
    for ((n, t), v) in limit.names.iter().zip(&truth).zip(&limit.estimates) {
        let _ = writeln!(
            s,
            "{n},{},{},{}",
            crate::io::fmt_num(*t),
            crate::io::fmt_num(*v),
            crate::io::fmt_num((v - t).abs())
        );
    }
    s
}
