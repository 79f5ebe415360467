//! Model description, clustered data, and the unconstrained parameter vector.

use std::fmt;

use crate::error::{Error, Result};
use crate::family_spec::RanefSpec;
use crate::ranef::{standardize, Effect, RanefFamily, StandardizedRanef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeFamily {
    BernoulliLogit,
    GaussianIdentity,
}

impl fmt::Display for OutcomeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeFamily::BernoulliLogit => write!(f, "bernoulli"),
            OutcomeFamily::GaussianIdentity => write!(f, "gaussian"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomStructure {
    InterceptOnly,
    /// Random slope on covariate column `slope_covariate` (0-based, excluding
    /// the intercept).
    InterceptAndSlope {
        slope_covariate: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub outcome: OutcomeFamily,
    pub covariate_names: Vec<String>,
    pub random: RandomStructure,
    pub ranef: RanefSpec,
}

impl ModelSpec {
    pub fn new(
        outcome: OutcomeFamily,
        covariate_names: Vec<String>,
        random: RandomStructure,
        ranef: RanefSpec,
    ) -> Result<Self> {
        let spec = ModelSpec {
            outcome,
            covariate_names,
            random,
            ranef,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariate_names.len();
        match self.random {
            RandomStructure::InterceptAndSlope { slope_covariate } => {
                if slope_covariate >= p {
                    return Err(Error::Dimension(format!(
                        "slope covariate index {slope_covariate} but only {p} covariates"
                    )));
                }
                if !matches!(self.ranef.family, RanefFamily::BivariateNormal { .. }) {
                    return Err(Error::UnsupportedFamily {
                        family: self.ranef.family.name().into(),
                        what: "random intercepts and slopes (use bvnormal)",
                    });
                }
            }
            RandomStructure::InterceptOnly => {
                if self.ranef.family.is_bivariate() {
                    return Err(Error::UnsupportedFamily {
                        family: self.ranef.family.name().into(),
                        what: "random intercepts only",
                    });
                }
            }
        }
        if self.ranef.free_shape.len() != self.ranef.family.shape_len() {
            return Err(Error::Dimension("shape flags do not match family".into()));
        }
        Ok(())
    }

    pub fn n_fixed(&self) -> usize {
        self.covariate_names.len() + 1
    }

    pub fn has_slope(&self) -> bool {
        matches!(self.random, RandomStructure::InterceptAndSlope { .. })
    }

    pub fn slope_index(&self) -> Option<usize> {
        match self.random {
            RandomStructure::InterceptAndSlope { slope_covariate } => Some(slope_covariate),
            RandomStructure::InterceptOnly => None,
        }
    }

    /// Total length of the unconstrained parameter vector.
    pub fn n_params(&self) -> usize {
        self.n_fixed()
            + if self.has_slope() { 3 } else { 1 }
            + self.ranef.n_free_shape()
            + usize::from(self.outcome == OutcomeFamily::GaussianIdentity)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        names.extend(self.covariate_names.iter().cloned());
        if self.has_slope() {
            names.extend(["log_sd_intercept", "log_sd_slope", "atanh_corr"].map(String::from));
        } else {
            names.push("log_sigma_b".into());
        }
        let shape_names = self.ranef.family.shape_names();
        names.extend(
            shape_names
                .into_iter()
                .zip(&self.ranef.free_shape)
                .filter(|(_, free)| **free)
                .map(|(n, _)| n),
        );
        if self.outcome == OutcomeFamily::GaussianIdentity {
            names.push("log_sigma_eps".into());
        }
        names
    }

    /// Text form `family ~ x1 + x2 [| slope]`.
    pub fn formula(&self) -> String {
        let mut s = format!("{} ~ {}", self.outcome, self.covariate_names.join(" + "));
        if let Some(k) = self.slope_index() {
            s.push_str(&format!(" | {}", self.covariate_names[k]));
        }
        s
    }
}

/// Parsed form of `bernoulli ~ visit + bmi | visit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    pub outcome: OutcomeFamily,
    /// `None` means every non-key column of the data.
    pub covariates: Option<Vec<String>>,
    pub slope: Option<String>,
}

impl ModelFormula {
    /// Build the model against the covariate columns of a dataset; without
    /// an explicit covariate list every column is used, in file order.
    pub fn resolve(&self, available: &[String], ranef: RanefSpec) -> Result<ModelSpec> {
        let covariates = match &self.covariates {
            Some(c) => {
                if let Some(missing) = c.iter().find(|n| !available.contains(n)) {
                    return Err(Error::InvalidData(format!(
                        "missing covariate column `{missing}`"
                    )));
                }
                c.clone()
            }
            None => available.to_vec(),
        };
        let random = match &self.slope {
            Some(s) => RandomStructure::InterceptAndSlope {
                slope_covariate: covariates.iter().position(|c| c == s).ok_or_else(|| {
                    Error::ModelSpec {
                        input: s.clone(),
                        reason: format!("slope `{s}` is not among the covariates"),
                    }
                })?,
            },
            None => RandomStructure::InterceptOnly,
        };
        ModelSpec::new(self.outcome, covariates, random, ranef)
    }
}

pub fn parse_model_formula(input: &str) -> Result<ModelFormula> {
    let err = |reason: &str| Error::ModelSpec {
        input: input.to_string(),
        reason: reason.to_string(),
    };
    let (lhs, rhs) = match input.split_once('~') {
        Some((l, r)) => (l.trim(), Some(r.trim())),
        None => (input.trim(), None),
    };
    let outcome = match lhs.to_lowercase().as_str() {
        "bernoulli" | "logit" | "binomial" => OutcomeFamily::BernoulliLogit,
        "gaussian" | "normal" | "identity" => OutcomeFamily::GaussianIdentity,
        _ => return Err(err("outcome family must be bernoulli or gaussian")),
    };
    let (covariates, slope) = match rhs {
        None => (None, None),
        Some(r) => {
            let (terms, slope) = match r.split_once('|') {
                Some((t, s)) => (t, Some(s.trim().to_string())),
                None => (r, None),
            };
            let covs: Vec<String> = terms
                .split('+')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            if covs.is_empty() {
                return Err(err("no covariates after `~`"));
            }
            if let Some(s) = &slope {
                if s.is_empty() {
                    return Err(err("empty slope term after `|`"));
                }
            }
            (Some(covs), slope)
        }
    };
    Ok(ModelFormula {
        outcome,
        covariates,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: Vec<f64>,
    /// One covariate row (width p, no intercept column) per observation.
    pub x: Vec<Vec<f64>>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub clusters: Vec<Cluster>,
    /// Realized random effects, present for simulated data.
    pub true_ranef: Option<Vec<Effect>>,
}

impl Dataset {
    pub fn n_observations(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn validate(&self, outcome: OutcomeFamily) -> Result<()> {
        let p = self.covariate_names.len();
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::InvalidData(format!(
                    "cluster `{}` has no observations",
                    c.id
                )));
            }
            if c.x.len() != c.y.len() {
                return Err(Error::Dimension(format!(
                    "cluster `{}`: {} rows for {} outcomes",
                    c.id,
                    c.x.len(),
                    c.y.len()
                )));
            }
            if let Some(row) = c.x.iter().find(|r| r.len() != p) {
                return Err(Error::Dimension(format!(
                    "cluster `{}`: row of width {} but {p} covariates",
                    c.id,
                    row.len()
                )));
            }
            if c.y
                .iter()
                .chain(c.x.iter().flatten())
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidData(format!(
                    "cluster `{}` has non-finite values",
                    c.id
                )));
            }
            if outcome == OutcomeFamily::BernoulliLogit && c.y.iter().any(|&v| v != 0.0 && v != 1.0)
            {
                return Err(Error::InvalidData(format!(
                    "cluster `{}`: bernoulli outcomes must be 0 or 1",
                    c.id
                )));
            }
        }
        if let Some(t) = &self.true_ranef {
            if t.len() != self.clusters.len() {
                return Err(Error::Dimension(
                    "one true random effect per cluster required".into(),
                ));
            }
        }
        Ok(())
    }

    /// Keep only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::InvalidData(format!("missing covariate column `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            covariate_names: names.to_vec(),
            clusters: self
                .clusters
                .iter()
                .map(|c| Cluster {
                    id: c.id.clone(),
                    y: c.y.clone(),
                    x: c.x
                        .iter()
                        .map(|r| idx.iter().map(|&j| r[j]).collect())
                        .collect(),
                })
                .collect(),
            true_ranef: self.true_ranef.clone(),
        })
    }
}

/// Parameters on the unconstrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    /// Intercept first.
    pub beta: Vec<f64>,
    /// Present for random-intercept models.
    pub log_sigma_b: Option<f64>,
    /// `(log sd_intercept, log sd_slope, atanh corr)` for slope models.
    pub covariance: Option<[f64; 3]>,
    /// Free shape coordinates only.
    pub shape: Vec<f64>,
    pub log_sigma_eps: Option<f64>,
}

/// Random-effects distribution implied by a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum RanefModel {
    Scalar(StandardizedRanef),
    Bivariate { chol: [[f64; 2]; 2] },
}

impl ParamVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        if let Some(c) = self.covariance {
            v.extend(c);
        }
        if let Some(s) = self.log_sigma_b {
            v.push(s);
        }
        v.extend(&self.shape);
        if let Some(e) = self.log_sigma_eps {
            v.push(e);
        }
        v
    }

    pub fn from_vec(model: &ModelSpec, v: &[f64]) -> Result<ParamVector> {
        if v.len() != model.n_params() {
            return Err(Error::Dimension(format!(
                "parameter vector of length {} but model needs {}",
                v.len(),
                model.n_params()
            )));
        }
        let p1 = model.n_fixed();
        let mut at = p1;
        let beta = v[..p1].to_vec();
        let (log_sigma_b, covariance) = if model.has_slope() {
            at += 3;
            (None, Some([v[p1], v[p1 + 1], v[p1 + 2]]))
        } else {
            at += 1;
            (Some(v[p1]), None)
        };
        let k = model.ranef.n_free_shape();
        let shape = v[at..at + k].to_vec();
        at += k;
        let log_sigma_eps = (model.outcome == OutcomeFamily::GaussianIdentity).then(|| v[at]);
        Ok(ParamVector {
            beta,
            log_sigma_b,
            covariance,
            shape,
            log_sigma_eps,
        })
    }

    /// Shape coordinates of the full family: fixed ones from the family text, free
    /// ones from this vector.
    pub fn full_shape(&self, model: &ModelSpec) -> Vec<f64> {
        let mut coords = model.ranef.family.shape_coords();
        let mut free = self.shape.iter();
        for (c, is_free) in coords.iter_mut().zip(&model.ranef.free_shape) {
            if *is_free {
                *c = *free.next().expect("free shape coordinate");
            }
        }
        coords
    }

    pub fn ranef_family(&self, model: &ModelSpec) -> RanefFamily {
        match self.covariance {
            Some([a, b, c]) => RanefFamily::BivariateNormal {
                log_sd_intercept: a,
                log_sd_slope: b,
                atanh_correlation: c,
            },
            None => {
                if model.ranef.n_free_shape() == 0 {
                    model.ranef.family.clone()
                } else {
                    model
                        .ranef
                        .family
                        .with_shape_coords(&self.full_shape(model))
                }
            }
        }
    }

    pub fn ranef_model(&self, model: &ModelSpec) -> Result<RanefModel> {
        let family = self.ranef_family(model);
        if let Some(chol) = family.bivariate_cholesky() {
            return Ok(RanefModel::Bivariate { chol });
        }
        let sigma_b = self.log_sigma_b.unwrap_or(0.0).exp();
        Ok(RanefModel::Scalar(standardize(&family, sigma_b)?))
    }

    pub fn sigma_eps(&self) -> f64 {
        self.log_sigma_eps.map_or(1.0, f64::exp)
    }
}
