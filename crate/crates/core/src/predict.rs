//! Empirical-Bayes prediction of realized random effects.
//!
//! Modes are taken in the space the family is declared in: `b` for the
//! normal and centered exponential families, `z` for Tukey(g,h) (mapped back
//! through `b(z)`), the support for discrete families. Means use the same
//! quadrature grids as the likelihood.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::likelihood::{ClusterTerms, Evaluator, Integrator, Prepared, QuadSettings};
use crate::model::{Cluster, Dataset, RanefModel};
use crate::par::{map_collect, ExecMode};
use crate::ranef::{Effect, RanefFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMethod {
    Mode,
    Mean,
}

impl fmt::Display for PredictMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictMethod::Mode => "mode",
            PredictMethod::Mean => "mean",
        })
    }
}

impl FromStr for PredictMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "mode" => Ok(PredictMethod::Mode),
            "mean" => Ok(PredictMethod::Mean),
            other => Err(Error::InvalidData(format!(
                "unknown prediction method `{other}` (mode|mean)"
            ))),
        }
    }
}

/// Discrete fits default to the posterior mean, everything else to the mode.
pub fn default_method(fit: &FitResult) -> PredictMethod {
    match fit.model.ranef.family {
        RanefFamily::DiscreteK { .. } => PredictMethod::Mean,
        _ => PredictMethod::Mode,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub method: PredictMethod,
    pub cluster_ids: Vec<String>,
    pub effects: Vec<Effect>,
    pub truths: Option<Vec<Effect>>,
}

impl PredictionSet {
    pub fn intercepts(&self) -> Vec<f64> {
        self.effects.iter().map(Effect::intercept).collect()
    }
}

fn mode_of(ev: &Evaluator<'_>, t: &ClusterTerms, sigma_b: f64, family: &RanefFamily) -> Effect {
    if ev.is_bivariate() {
        let m = ev.mode(t);
        let b = ev.effect_at(m.z);
        return Effect::Pair(b[0], b[1]);
    }
    if ev.is_discrete() {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for (b, lw) in ev.nodes(None) {
            let v = lw + ev.conditional(t, b);
            // strict comparison keeps the lowest-index point on ties
            if v > best.0 {
                best = (v, b[0]);
            }
        }
        return Effect::Scalar(best.1);
    }
    match family {
        RanefFamily::CenteredExponential => Effect::Scalar(exponential_mode(ev, t, sigma_b)),
        // normal: z = b/σ is linear, so the z-mode is the b-mode
        _ => {
            let m = ev.mode(t);
            Effect::Scalar(ev.effect_at(m.z)[0])
        }
    }
}

/// Maximize `ℓ(b) - b/σ` over `b ≥ -σ`; the objective is concave.
fn exponential_mode(ev: &Evaluator<'_>, t: &ClusterTerms, sigma: f64) -> f64 {
    let slope = |b: f64| {
        let (_, d, dd) = ev.partition_derivatives(t.group, [b, 0.0]);
        (t.u[0] - d[0] - 1.0 / sigma, -dd[0][0])
    };
    let lo = -sigma;
    if slope(lo).0 <= 0.0 {
        return lo;
    }
    let mut hi = lo + sigma.max(1.0);
    let mut expand = 0;
    while slope(hi).0 > 0.0 && expand < 200 {
        hi = lo + 2.0 * (hi - lo);
        expand += 1;
    }
    let (mut a, mut c) = (lo, hi);
    let mut b = 0.5 * (a + c);
    for _ in 0..200 {
        let (g, h) = slope(b);
        if g > 0.0 {
            a = b;
        } else {
            c = b;
        }
        let newton = if h < 0.0 { b - g / h } else { f64::NAN };
        let next = if newton > a && newton < c {
            newton
        } else {
            0.5 * (a + c)
        };
        if (next - b).abs() <= 1e-13 * (1.0 + b.abs()) || c - a <= 1e-14 * (1.0 + b.abs()) {
            return next;
        }
        b = next;
    }
    b
}

fn mean_of(ev: &Evaluator<'_>, t: &ClusterTerms, adaptive: bool) -> Effect {
    let nodes = ev.nodes(if adaptive { Some(t) } else { None });
    let logs: Vec<f64> = nodes
        .iter()
        .map(|&(b, lw)| lw + ev.conditional(t, b))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut s0, mut s1) = (0.0, 0.0, 0.0);
    for (&(b, _), l) in nodes.iter().zip(&logs) {
        let w = (l - max).exp();
        s += w;
        s0 += w * b[0];
        s1 += w * b[1];
    }
    if ev.is_bivariate() {
        Effect::Pair(s0 / s, s1 / s)
    } else {
        Effect::Scalar(s0 / s)
    }
}

fn prior_prediction(fit: &FitResult, method: PredictMethod) -> Result<Effect> {
    match fit.theta.ranef_model(&fit.model)? {
        RanefModel::Bivariate { .. } => Ok(Effect::Pair(0.0, 0.0)),
        RanefModel::Scalar(st) => Ok(Effect::Scalar(match (method, &st.family) {
            (PredictMethod::Mean, _) => 0.0,
            (PredictMethod::Mode, RanefFamily::CenteredExponential) => -st.sigma_b,
            (PredictMethod::Mode, RanefFamily::DiscreteK { .. }) => {
                let support = st.discrete_support().expect("discrete");
                let mut best = support[0];
                for &p in &support[1..] {
                    if p.1 > best.1 {
                        best = p;
                    }
                }
                best.0
            }
            (PredictMethod::Mode, _) => st.z_representation()?.eval(0.0),
        })),
    }
}

/// Predictions for every cluster of `data`, in input order.
pub fn predict(
    data: &Dataset,
    fit: &FitResult,
    method: PredictMethod,
    quad: QuadSettings,
    exec: ExecMode,
) -> Result<PredictionSet> {
    let prep = Prepared::new(data, &fit.model)?;
    let integ = Integrator::new(quad)?;
    let ev = Evaluator::new(&prep, &integ, &fit.model, &fit.theta)?;
    let sigma_b = fit.theta.log_sigma_b.map_or(1.0, f64::exp);
    let family = fit.theta.ranef_family(&fit.model);

    // the posterior depends on a cluster only through (pattern, u)
    let terms: Vec<ClusterTerms> = (0..data.clusters.len()).map(|i| ev.terms(i)).collect();
    let mut key_index: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    let mut distinct: Vec<ClusterTerms> = Vec::new();
    let slot: Vec<usize> = terms
        .iter()
        .map(|t| {
            *key_index
                .entry((t.group, t.u[0].to_bits(), t.u[1].to_bits()))
                .or_insert_with(|| {
                    distinct.push(*t);
                    distinct.len() - 1
                })
        })
        .collect();
    let ev_ref = &ev;
    let family_ref = &family;
    let effects_distinct = map_collect(exec, &distinct, |t| match method {
        PredictMethod::Mode => mode_of(ev_ref, t, sigma_b, family_ref),
        PredictMethod::Mean => mean_of(ev_ref, t, ev_ref.adaptive_for_group(t.group)),
    });
    Ok(PredictionSet {
        method,
        cluster_ids: data.clusters.iter().map(|c| c.id.clone()).collect(),
        effects: slot.iter().map(|&k| effects_distinct[k]).collect(),
        truths: data.true_ranef.clone(),
    })
}

fn single(cluster: &Cluster, covariate_names: &[String]) -> Dataset {
    Dataset {
        covariate_names: covariate_names.to_vec(),
        clusters: vec![cluster.clone()],
        true_ranef: None,
    }
}

pub fn posterior_mode(
    cluster: &Cluster,
    covariate_names: &[String],
    fit: &FitResult,
) -> Result<Effect> {
    if cluster.is_empty() {
        return prior_prediction(fit, PredictMethod::Mode);
    }
    let set = predict(
        &single(cluster, covariate_names),
        fit,
        PredictMethod::Mode,
        QuadSettings::default(),
        ExecMode::Sequential,
    )?;
    Ok(set.effects[0])
}

pub fn posterior_mean(
    cluster: &Cluster,
    covariate_names: &[String],
    fit: &FitResult,
    quad: QuadSettings,
) -> Result<Effect> {
    if cluster.is_empty() {
        return prior_prediction(fit, PredictMethod::Mean);
    }
    let set = predict(
        &single(cluster, covariate_names),
        fit,
        PredictMethod::Mean,
        quad,
        ExecMode::Sequential,
    )?;
    Ok(set.effects[0])
}

/// Mean squared prediction error per component (intercept, then slope).
pub fn msep(predictions: &PredictionSet, truths: Option<&[Effect]>) -> Result<Vec<f64>> {
    let truths = truths
        .or(predictions.truths.as_deref())
        .ok_or(Error::MissingTruth)?;
    if truths.len() != predictions.effects.len() {
        return Err(Error::Dimension(format!(
            "{} truths for {} predictions",
            truths.len(),
            predictions.effects.len()
        )));
    }
    let k = predictions
        .effects
        .first()
        .map_or(1, |e| e.components().len());
    let mut sums = vec![0.0; k];
    for (p, t) in predictions.effects.iter().zip(truths) {
        let (pc, tc) = (p.components(), t.components());
        for j in 0..k {
            let d = pc[j] - tc.get(j).copied().unwrap_or(0.0);
            sums[j] += d * d;
        }
    }
    let n = predictions.effects.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins spanning the range of `values`; the top edge is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + k as f64 * width,
            upper: if k + 1 == bins {
                hi.max(lo + width)
            } else {
                lo + (k + 1) as f64 * width
            },
            count,
        })
        .collect()
}
