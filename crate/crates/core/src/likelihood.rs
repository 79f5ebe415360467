//! Marginal likelihood of a clustered GLMM.
//!
//! Conditional on its random effect `b`, a cluster contributes
//! `a + u·b - A_g(b)`: `a` and `u` are cluster sufficient statistics and the
//! partition term `A_g` depends only on the cluster's covariate pattern `g`.
//! Clusters sharing a pattern share `A_g` on the quadrature grid, and for the
//! logistic model clusters with equal `(g, u)` share the whole integral.
//! Observations, patterns and clusters are put in a canonical order up front,
//! so the total does not depend on how the input happened to be ordered.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{Cluster, Dataset, ModelSpec, OutcomeFamily, ParamVector, RanefModel};
use crate::quadrature::{golub_welsch, tensor_grid, MAX_ORDER_1D, MAX_ORDER_2D};
use crate::ranef::{Effect, ZMap};
use crate::special::{expit, log1pexp, NeumaierSum, LN_SQRT_2PI};

/// Scalar-effect clusters at least this large get adaptive quadrature under
/// [`AdaptiveMode::Auto`]; Gaussian outcomes always do. Bivariate effects use
/// the fixed nested rule unless adaptation is forced on.
pub const AUTO_ADAPTIVE_MIN_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdaptiveMode {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadSettings {
    /// Gauss–Hermite order for scalar random effects.
    pub points: usize,
    /// Bivariate effects: Gauss–Hermite order over the intercept axis, or
    /// per axis of the recentred tensor grid under [`AdaptiveMode::On`].
    pub points_2d: usize,
    pub adaptive: AdaptiveMode,
}

impl Default for QuadSettings {
    fn default() -> Self {
        QuadSettings {
            points: 25,
            points_2d: 20,
            adaptive: AdaptiveMode::Auto,
        }
    }
}

impl QuadSettings {
    pub fn adaptive_for(&self, cluster_size: usize) -> bool {
        match self.adaptive {
            AdaptiveMode::On => true,
            AdaptiveMode::Off => false,
            AdaptiveMode::Auto => cluster_size >= AUTO_ADAPTIVE_MIN_SIZE,
        }
    }
}

/// Node multiplier for scalar effects that are not a linear function of the
/// underlying normal (Tukey, exponential). Their integrands in z are skewed,
/// with a steep cutoff on one side, and Q nodes leave errors near 1e-5 per
/// cluster where the normal family is exact to 1e-10. Fitted free shapes
/// with g near 2 need the full factor.
pub const SKEWED_ORDER_FACTOR: usize = 4;

/// Half-width and step of the trapezoid rule along the inner axis of the
/// bivariate rule. With several steep logits per cluster (large slope SD
/// times covariate values up to 8) the posterior has sharp edges that no
/// Gauss–Hermite grid of moderate order resolves, recentred or not; the
/// trapezoid rule converges geometrically for such integrands.
pub const BIVARIATE_INNER_HALF_WIDTH: f64 = 8.5;
pub const BIVARIATE_INNER_STEP: f64 = 0.025;

/// Nested-rule nodes whose log weight falls this far below the largest
/// are dropped (fixed, so the likelihood stays smooth in the parameters).
const NESTED_PRUNE: f64 = 60.0;

/// Nodes in outer-major order; each outer node's inner nodes form one
/// contiguous, equally spaced line (pruning only trims the ends).
fn nested_grid(outer: usize) -> (Vec<[f64; 2]>, Vec<f64>, Vec<Range<usize>>) {
    let rule = golub_welsch(outer);
    let k = (BIVARIATE_INNER_HALF_WIDTH / BIVARIATE_INNER_STEP).round() as i64;
    let base = BIVARIATE_INNER_STEP.ln() - LN_SQRT_2PI;
    let mut nodes = Vec::new();
    let mut lws = Vec::new();
    let mut lines = Vec::new();
    for (&z0, &w0) in rule.nodes.iter().zip(&rule.weights) {
        let start = nodes.len();
        for j in -k..=k {
            let z1 = j as f64 * BIVARIATE_INNER_STEP;
            let lw = w0.ln() + base - 0.5 * z1 * z1;
            if lw > -NESTED_PRUNE {
                nodes.push([z0, z1]);
                lws.push(lw);
            }
        }
        if nodes.len() > start {
            lines.push(start..nodes.len());
        }
    }
    (nodes, lws, lines)
}

/// Gauss–Hermite nodes with log weights, built once per settings.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub settings: QuadSettings,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
    skewed_nodes: Vec<f64>,
    skewed_log_weights: Vec<f64>,
    nodes_2d: Vec<[f64; 2]>,
    log_weights_2d: Vec<f64>,
    nested_nodes: Vec<[f64; 2]>,
    nested_log_weights: Vec<f64>,
    nested_lines: Vec<Range<usize>>,
}

impl Integrator {
    pub fn new(settings: QuadSettings) -> Result<Integrator> {
        if settings.points > MAX_ORDER_1D {
            return Err(Error::QuadratureOrder {
                order: settings.points,
                max: MAX_ORDER_1D,
            });
        }
        let max_2d = if settings.adaptive == AdaptiveMode::On {
            MAX_ORDER_2D
        } else {
            MAX_ORDER_1D
        };
        if settings.points_2d > max_2d || settings.points_2d == 0 {
            return Err(Error::QuadratureOrder {
                order: settings.points_2d,
                max: max_2d,
            });
        }
        if settings.points == 0 {
            return Err(Error::QuadratureOrder {
                order: 0,
                max: MAX_ORDER_1D,
            });
        }
        let rule = golub_welsch(settings.points);
        let skewed = golub_welsch(SKEWED_ORDER_FACTOR * settings.points);
        let tensor = tensor_grid(settings.points_2d.min(MAX_ORDER_2D))?;
        let (nested_nodes, nested_log_weights, nested_lines) = nested_grid(settings.points_2d);
        Ok(Integrator {
            nested_lines,
            nested_nodes,
            nested_log_weights,
            settings,
            skewed_log_weights: skewed.weights.iter().map(|w| w.ln()).collect(),
            skewed_nodes: skewed.nodes,
            log_weights: rule.weights.iter().map(|w| w.ln()).collect(),
            nodes: rule.nodes,
            log_weights_2d: tensor.weights.iter().map(|w| w.ln()).collect(),
            nodes_2d: tensor.nodes,
        })
    }
}

#[derive(Debug, Clone)]
struct Group {
    n: usize,
    /// Row-major `n × p1`, intercept column included.
    rows: Vec<f64>,
    /// Slope covariate per observation (zeros without a random slope).
    slope: Vec<f64>,
    slope_sum: f64,
    slope_sq_sum: f64,
}

#[derive(Debug, Clone)]
struct PreparedCluster {
    original: usize,
    group: usize,
    /// Outcomes in the canonical observation order of the group.
    y: Vec<f64>,
    yx: Vec<f64>,
    u: [f64; 2],
}

#[derive(Debug, Clone)]
struct Profile {
    group: usize,
    u: [f64; 2],
    count: usize,
}

/// Data rearranged for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    outcome: OutcomeFamily,
    p1: usize,
    groups: Vec<Group>,
    clusters: Vec<PreparedCluster>,
    profiles: Vec<Profile>,
    /// Canonical position of each input cluster.
    position: Vec<usize>,
    yx_total: Vec<f64>,
    /// Largest absolute slope covariate value.
    slope_reach: f64,
}

fn bits(v: f64) -> u64 {
    // +0 and -0 must share a key
    (v + 0.0).to_bits()
}

impl Prepared {
    pub fn new(data: &Dataset, model: &ModelSpec) -> Result<Prepared> {
        model.validate()?;
        if data.covariate_names.len() != model.covariate_names.len() {
            return Err(Error::Dimension(format!(
                "data has {} covariates, model expects {}",
                data.covariate_names.len(),
                model.covariate_names.len()
            )));
        }
        if data.clusters.is_empty() {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        data.validate(model.outcome)?;
        let p1 = model.n_fixed();
        let slope_idx = model.slope_index();

        // canonical observation order within each cluster
        let sorted: Vec<Vec<(Vec<u64>, f64, &[f64])>> = data
            .clusters
            .iter()
            .map(|c| {
                let mut obs: Vec<(Vec<u64>, f64, &[f64])> =
                    c.x.iter()
                        .zip(&c.y)
                        .map(|(r, &y)| (r.iter().map(|&v| bits(v)).collect(), y, r.as_slice()))
                        .collect();
                obs.sort_by(|a, b| a.0.cmp(&b.0).then(bits(a.1).cmp(&bits(b.1))));
                obs
            })
            .collect();

        let mut group_keys: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        for obs in &sorted {
            let key: Vec<u64> = obs
                .iter()
                .flat_map(|o| o.0.iter().copied())
                .chain([obs.len() as u64])
                .collect();
            group_keys.entry(key).or_insert(0);
        }
        let mut groups = Vec::with_capacity(group_keys.len());
        for (g, (_, idx)) in group_keys.iter_mut().enumerate() {
            *idx = g;
        }
        let mut group_of = Vec::with_capacity(sorted.len());
        for obs in &sorted {
            let key: Vec<u64> = obs
                .iter()
                .flat_map(|o| o.0.iter().copied())
                .chain([obs.len() as u64])
                .collect();
            group_of.push(group_keys[&key]);
        }
        // materialize groups in key order
        let mut first_member = vec![usize::MAX; group_keys.len()];
        for (i, &g) in group_of.iter().enumerate() {
            if first_member[g] == usize::MAX {
                first_member[g] = i;
            }
        }
        for &i in &first_member {
            let obs = &sorted[i];
            let mut rows = Vec::with_capacity(obs.len() * p1);
            let mut slope = Vec::with_capacity(obs.len());
            for o in obs {
                rows.push(1.0);
                rows.extend_from_slice(o.2);
                slope.push(slope_idx.map_or(0.0, |k| o.2[k]));
            }
            let mut s1 = NeumaierSum::default();
            let mut s2 = NeumaierSum::default();
            for &s in &slope {
                s1.add(s);
                s2.add(s * s);
            }
            groups.push(Group {
                n: obs.len(),
                rows,
                slope,
                slope_sum: s1.value(),
                slope_sq_sum: s2.value(),
            });
        }

        let mut clusters: Vec<PreparedCluster> = sorted
            .iter()
            .enumerate()
            .map(|(i, obs)| {
                let g = group_of[i];
                let grp = &groups[g];
                let y: Vec<f64> = obs.iter().map(|o| o.1).collect();
                let mut yx = vec![0.0; p1];
                for (t, &yt) in y.iter().enumerate() {
                    for (j, acc) in yx.iter_mut().enumerate() {
                        *acc += yt * grp.rows[t * p1 + j];
                    }
                }
                let u = [
                    y.iter().sum(),
                    y.iter().zip(&grp.slope).map(|(a, b)| a * b).sum(),
                ];
                PreparedCluster {
                    original: i,
                    group: g,
                    y,
                    yx,
                    u,
                }
            })
            .collect();
        clusters.sort_by(|a, b| {
            a.group.cmp(&b.group).then_with(|| {
                a.y.iter()
                    .map(|&v| bits(v))
                    .cmp(b.y.iter().map(|&v| bits(v)))
            })
        });
        let mut position = vec![0; clusters.len()];
        for (k, c) in clusters.iter().enumerate() {
            position[c.original] = k;
        }

        let mut yx_total = vec![0.0; p1];
        for (j, t) in yx_total.iter_mut().enumerate() {
            let mut s = NeumaierSum::default();
            for c in &clusters {
                s.add(c.yx[j]);
            }
            *t = s.value();
        }

        let mut profile_map: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
        for c in &clusters {
            *profile_map
                .entry((c.group, bits(c.u[0]), bits(c.u[1])))
                .or_insert(0) += 1;
        }
        let profiles = profile_map
            .into_iter()
            .map(|((group, u0, u1), count)| Profile {
                group,
                u: [f64::from_bits(u0), f64::from_bits(u1)],
                count,
            })
            .collect();

        Ok(Prepared {
            outcome: model.outcome,
            p1,
            clusters,
            profiles,
            slope_reach: groups
                .iter()
                .flat_map(|g| g.slope.iter())
                .fold(0.0, |m: f64, s| m.max(s.abs())),
            position,
            yx_total,
            groups,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_patterns(&self) -> usize {
        self.groups.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.profiles.len()
    }

    pub fn cluster_size(&self, original: usize) -> usize {
        self.groups[self.clusters[self.position[original]].group].n
    }
}

/// Per-cluster quantities at fixed parameters: `ℓ(b) = a + u·b - A_g(b)`.
#[derive(Debug, Clone, Copy)]
pub struct ClusterTerms {
    pub a: f64,
    pub u: [f64; 2],
    pub group: usize,
}

#[derive(Debug, Clone)]
enum EffectGrid {
    Scalar {
        map: ZMap,
    },
    Discrete {
        support: Vec<(f64, f64)>,
    },
    Bivariate {
        chol: [[f64; 2]; 2],
        /// Orthonormal outer and inner directions of the nested rule.
        axes: [[f64; 2]; 2],
    },
}

/// Directions for the nested rule in whitened coordinates. The inner
/// (trapezoid) axis follows the linear predictor at the largest slope
/// covariate value; for nonnegative covariates every other observation's
/// predictor then changes along the outer axis no faster than the intercept
/// effect does, which Gauss–Hermite handles well.
fn nested_axes(l: [[f64; 2]; 2], reach: f64) -> [[f64; 2]; 2] {
    let a = [l[0][0] + reach * l[1][0], reach * l[1][1]];
    let norm = a[0].hypot(a[1]);
    if !(norm > 0.0) || !norm.is_finite() {
        return [[1.0, 0.0], [0.0, 1.0]];
    }
    let inner = [a[0] / norm, a[1] / norm];
    [[-inner[1], inner[0]], inner]
}

/// A prepared dataset bound to one parameter value.
pub struct Evaluator<'a> {
    prep: &'a Prepared,
    integ: &'a Integrator,
    grid: EffectGrid,
    sigma_eps: f64,
    beta: Vec<f64>,
    /// `x'β` per observation of each group.
    eta: Vec<Vec<f64>>,
}

/// Outcome of the inner mode search used for adaptive quadrature.
#[derive(Debug, Clone, Copy)]
pub struct ModeInfo {
    /// Mode in the standard-normal coordinates.
    pub z: [f64; 2],
    /// Lower-triangular factor of the inverse curvature (1-D uses `[0][0]`).
    pub spread: [[f64; 2]; 2],
}

impl<'a> Evaluator<'a> {
    pub fn new(
        prep: &'a Prepared,
        integ: &'a Integrator,
        model: &ModelSpec,
        theta: &ParamVector,
    ) -> Result<Evaluator<'a>> {
        if theta.beta.len() != prep.p1 {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} columns",
                theta.beta.len(),
                prep.p1
            )));
        }
        let grid = match theta.ranef_model(model)? {
            RanefModel::Bivariate { chol } => EffectGrid::Bivariate {
                chol,
                axes: nested_axes(chol, prep.slope_reach),
            },
            RanefModel::Scalar(st) => match st.discrete_support() {
                Some(support) => EffectGrid::Discrete { support },
                None => EffectGrid::Scalar {
                    map: st.z_representation()?,
                },
            },
        };
        let p1 = prep.p1;
        let eta = prep
            .groups
            .iter()
            .map(|g| {
                (0..g.n)
                    .map(|t| {
                        g.rows[t * p1..(t + 1) * p1]
                            .iter()
                            .zip(&theta.beta)
                            .map(|(x, b)| x * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Ok(Evaluator {
            prep,
            integ,
            grid,
            sigma_eps: theta.sigma_eps(),
            beta: theta.beta.clone(),
            eta,
        })
    }

    pub fn terms(&self, original: usize) -> ClusterTerms {
        self.terms_of(&self.prep.clusters[self.prep.position[original]])
    }

    fn terms_of(&self, c: &PreparedCluster) -> ClusterTerms {
        match self.prep.outcome {
            OutcomeFamily::BernoulliLogit => ClusterTerms {
                a: c.yx.iter().zip(&self.beta).map(|(x, b)| x * b).sum(),
                u: c.u,
                group: c.group,
            },
            OutcomeFamily::GaussianIdentity => {
                let g = &self.prep.groups[c.group];
                let eta = &self.eta[c.group];
                let (mut sr, mut srs, mut srr) = (0.0, 0.0, 0.0);
                for t in 0..g.n {
                    let r = c.y[t] - eta[t];
                    sr += r;
                    srs += r * g.slope[t];
                    srr += r * r;
                }
                let v = self.sigma_eps * self.sigma_eps;
                ClusterTerms {
                    a: -srr / (2.0 * v) - g.n as f64 * (self.sigma_eps.ln() + LN_SQRT_2PI),
                    u: [sr / v, srs / v],
                    group: c.group,
                }
            }
        }
    }

    /// `A_g(b)`.
    pub fn partition(&self, group: usize, b: [f64; 2]) -> f64 {
        let g = &self.prep.groups[group];
        match self.prep.outcome {
            OutcomeFamily::BernoulliLogit => {
                let eta = &self.eta[group];
                let mut s = 0.0;
                for t in 0..g.n {
                    s += log1pexp(eta[t] + b[0] + b[1] * g.slope[t]);
                }
                s
            }
            OutcomeFamily::GaussianIdentity => {
                let n = g.n as f64;
                (n * b[0] * b[0] + 2.0 * b[0] * b[1] * g.slope_sum + b[1] * b[1] * g.slope_sq_sum)
                    / (2.0 * self.sigma_eps * self.sigma_eps)
            }
        }
    }

    /// `A_g(b)` written as `k·b + rest`, where `k_0` counts the linear
    /// predictors above zero and `k_1` sums their slope covariate. Far out
    /// in a heavy tail `b` is huge and `u·b - A_g(b)` would cancel two huge
    /// numbers; `(u - k)·b - rest` does not.
    pub fn partition_split(&self, group: usize, b: [f64; 2]) -> ([f64; 2], f64) {
        let g = &self.prep.groups[group];
        match self.prep.outcome {
            OutcomeFamily::BernoulliLogit => {
                let eta = &self.eta[group];
                let (mut k0, mut k1, mut rest) = (0.0, 0.0, 0.0);
                for t in 0..g.n {
                    let s = g.slope[t];
                    let x = eta[t] + b[0] + b[1] * s;
                    if x > 0.0 {
                        k0 += 1.0;
                        k1 += s;
                        rest += eta[t] + (-x).exp().ln_1p();
                    } else {
                        rest += x.exp().ln_1p();
                    }
                }
                ([k0, k1], rest)
            }
            OutcomeFamily::GaussianIdentity => ([0.0, 0.0], self.partition(group, b)),
        }
    }

    /// `u·b - A_g(b)`.
    pub fn log_kernel(&self, group: usize, u: [f64; 2], b: [f64; 2]) -> f64 {
        let (k, rest) = self.partition_split(group, b);
        kernel(u, k, rest, b)
    }

    /// `A_g`, its gradient and Hessian in `b`.
    pub fn partition_derivatives(
        &self,
        group: usize,
        b: [f64; 2],
    ) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let g = &self.prep.groups[group];
        match self.prep.outcome {
            OutcomeFamily::BernoulliLogit => {
                let eta = &self.eta[group];
                let (mut a, mut d0, mut d1, mut h00, mut h01, mut h11) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for t in 0..g.n {
                    let s = g.slope[t];
                    let e = eta[t] + b[0] + b[1] * s;
                    let p = expit(e);
                    let w = p * (1.0 - p);
                    a += log1pexp(e);
                    d0 += p;
                    d1 += p * s;
                    h00 += w;
                    h01 += w * s;
                    h11 += w * s * s;
                }
                (a, [d0, d1], [[h00, h01], [h01, h11]])
            }
            OutcomeFamily::GaussianIdentity => {
                let v = self.sigma_eps * self.sigma_eps;
                let n = g.n as f64;
                let (s1, s2) = (g.slope_sum, g.slope_sq_sum);
                (
                    self.partition(group, b),
                    [(n * b[0] + b[1] * s1) / v, (b[0] * s1 + b[1] * s2) / v],
                    [[n / v, s1 / v], [s1 / v, s2 / v]],
                )
            }
        }
    }

    pub fn conditional(&self, t: &ClusterTerms, b: [f64; 2]) -> f64 {
        t.a + self.log_kernel(t.group, t.u, b)
    }

    pub fn is_bivariate(&self) -> bool {
        matches!(self.grid, EffectGrid::Bivariate { .. })
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.grid, EffectGrid::Discrete { .. })
    }

    pub fn z_map(&self) -> Option<&ZMap> {
        match &self.grid {
            EffectGrid::Scalar { map } => Some(map),
            _ => None,
        }
    }

    pub fn bivariate_chol(&self) -> Option<[[f64; 2]; 2]> {
        match self.grid {
            EffectGrid::Bivariate { chol, .. } => Some(chol),
            _ => None,
        }
    }

    /// `b` as a function of the standard-normal coordinates.
    pub fn effect_at(&self, z: [f64; 2]) -> [f64; 2] {
        match &self.grid {
            EffectGrid::Scalar { map } => [map.eval(z[0]), 0.0],
            EffectGrid::Bivariate { chol: l, .. } => {
                [l[0][0] * z[0], l[1][0] * z[0] + l[1][1] * z[1]]
            }
            EffectGrid::Discrete { .. } => [z[0], 0.0],
        }
    }

    /// Maximize `ℓ(b(z)) - |z|²/2`, the log integrand in z-space.
    pub fn mode(&self, t: &ClusterTerms) -> ModeInfo {
        match &self.grid {
            EffectGrid::Scalar { map } => {
                let (z, c) = self.scalar_mode(t, map);
                let s = c.sqrt().recip();
                ModeInfo {
                    z: [z, 0.0],
                    spread: [[s, 0.0], [0.0, 0.0]],
                }
            }
            EffectGrid::Bivariate { chol, .. } => self.bivariate_mode(t, *chol),
            EffectGrid::Discrete { .. } => ModeInfo {
                z: [0.0; 2],
                spread: [[1.0, 0.0], [0.0, 1.0]],
            },
        }
    }

    fn scalar_h(&self, t: &ClusterTerms, map: &ZMap, z: f64) -> f64 {
        let b = map.eval(z);
        self.log_kernel(t.group, t.u, [b, 0.0]) - 0.5 * z * z
    }

    fn scalar_mode(&self, t: &ClusterTerms, map: &ZMap) -> (f64, f64) {
        let derivs = |z: f64| {
            let (b, b1, b2) = map.eval_with_derivatives(z);
            let (_, da, dda) = self.partition_derivatives(t.group, [b, 0.0]);
            let h = self.log_kernel(t.group, t.u, [b, 0.0]) - 0.5 * z * z;
            let r = t.u[0] - da[0];
            let gn = dda[0][0] * b1 * b1 + 1.0;
            (h, r * b1 - z, r * b2 - gn, gn)
        };
        let mut z = 0.0;
        let (mut h, mut d1, mut d2, mut gn) = derivs(z);
        for _ in 0..100 {
            let mut step = if d2 < -1e-10 { -d1 / d2 } else { d1.signum() };
            step = step.clamp(-2.0, 2.0);
            let mut accepted = false;
            for _ in 0..40 {
                let cand = z + step;
                let hc = self.scalar_h(t, map, cand);
                if hc.is_finite() && hc >= h - 1e-14 * h.abs() {
                    z = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            (h, d1, d2, gn) = derivs(z);
            if step.abs() < 1e-10 || d1.abs() < 1e-11 {
                break;
            }
        }
        // Gauss-Newton curvature: the likelihood is bounded, so the grid
        // never needs to be wider than the prior (the exact curvature can
        // be near zero where a heavy-tailed map flattens the integrand)
        (z, gn)
    }

    fn bivariate_mode(&self, t: &ClusterTerms, l: [[f64; 2]; 2]) -> ModeInfo {
        let h_at = |z: [f64; 2]| {
            let b = self.effect_at(z);
            self.log_kernel(t.group, t.u, b) - 0.5 * (z[0] * z[0] + z[1] * z[1])
        };
        // gradient and negative Hessian in z
        let derivs = |z: [f64; 2]| {
            let b = self.effect_at(z);
            let (_, da, dda) = self.partition_derivatives(t.group, b);
            let r = [t.u[0] - da[0], t.u[1] - da[1]];
            let grad = [
                l[0][0] * r[0] + l[1][0] * r[1] - z[0],
                l[1][1] * r[1] - z[1],
            ];
            // Lᵀ H L + I
            let hl = [
                [
                    dda[0][0] * l[0][0] + dda[0][1] * l[1][0],
                    dda[0][1] * l[1][1],
                ],
                [
                    dda[1][0] * l[0][0] + dda[1][1] * l[1][0],
                    dda[1][1] * l[1][1],
                ],
            ];
            let c00 = l[0][0] * hl[0][0] + l[1][0] * hl[1][0] + 1.0;
            let c01 = l[0][0] * hl[0][1] + l[1][0] * hl[1][1];
            let c11 = l[1][1] * hl[1][1] + 1.0;
            (grad, [[c00, c01], [c01, c11]])
        };
        let mut z = [0.0; 2];
        let mut h = h_at(z);
        let (mut grad, mut curv) = derivs(z);
        for _ in 0..100 {
            let det = curv[0][0] * curv[1][1] - curv[0][1] * curv[1][0];
            let mut step = [
                (curv[1][1] * grad[0] - curv[0][1] * grad[1]) / det,
                (curv[0][0] * grad[1] - curv[1][0] * grad[0]) / det,
            ];
            let norm = step[0].hypot(step[1]);
            if norm > 2.0 {
                step = [step[0] * 2.0 / norm, step[1] * 2.0 / norm];
            }
            let mut accepted = false;
            for _ in 0..40 {
                let cand = [z[0] + step[0], z[1] + step[1]];
                let hc = h_at(cand);
                if hc.is_finite() && hc >= h - 1e-14 * h.abs() {
                    z = cand;
                    h = hc;
                    accepted = true;
                    break;
                }
                step = [step[0] * 0.5, step[1] * 0.5];
            }
            if !accepted {
                break;
            }
            (grad, curv) = derivs(z);
            if step[0].hypot(step[1]) < 1e-10 || grad[0].hypot(grad[1]) < 1e-11 {
                break;
            }
        }
        // factor of the inverse curvature
        let det = curv[0][0] * curv[1][1] - curv[0][1] * curv[1][0];
        let inv = [
            [curv[1][1] / det, -curv[0][1] / det],
            [-curv[1][0] / det, curv[0][0] / det],
        ];
        let l00 = inv[0][0].sqrt();
        let l10 = inv[1][0] / l00;
        let l11 = (inv[1][1] - l10 * l10).max(1e-12).sqrt();
        ModeInfo {
            z,
            spread: [[l00, 0.0], [l10, l11]],
        }
    }

    /// Effect values and log weights of the integration grid for a cluster.
    pub fn nodes(&self, t: Option<&ClusterTerms>) -> Vec<([f64; 2], f64)> {
        let integ = self.integ;
        match &self.grid {
            EffectGrid::Discrete { support } => support
                .iter()
                .filter(|(_, p)| *p > 0.0)
                .map(|&(b, p)| ([b, 0.0], p.ln()))
                .collect(),
            EffectGrid::Scalar { map } => {
                let (zs, lws) = if map.is_linear() {
                    (&integ.nodes, &integ.log_weights)
                } else {
                    (&integ.skewed_nodes, &integ.skewed_log_weights)
                };
                match t {
                    None => zs
                        .iter()
                        .zip(lws)
                        .map(|(&z, &lw)| ([map.eval(z), 0.0], lw))
                        .collect(),
                    Some(t) => {
                        let m = self.mode(t);
                        let (mode, s) = (m.z[0], m.spread[0][0]);
                        let ls = s.ln();
                        zs.iter()
                            .zip(lws)
                            .map(|(&z, &lw)| {
                                let v = mode + z * s;
                                ([map.eval(v), 0.0], lw + ls + 0.5 * (z * z - v * v))
                            })
                            .collect()
                    }
                }
            }
            EffectGrid::Bivariate { axes, .. } => match t {
                None => {
                    let rotate = |z: [f64; 2]| {
                        [
                            axes[0][0] * z[0] + axes[1][0] * z[1],
                            axes[0][1] * z[0] + axes[1][1] * z[1],
                        ]
                    };
                    // nodes on a line are exactly affine in their index
                    let d = self.effect_at(rotate([0.0, BIVARIATE_INNER_STEP]));
                    let mut out = Vec::with_capacity(integ.nested_nodes.len());
                    for line in &integ.nested_lines {
                        let b0 = self.effect_at(rotate(integ.nested_nodes[line.start]));
                        for (j, i) in line.clone().enumerate() {
                            let j = j as f64;
                            out.push((
                                [b0[0] + j * d[0], b0[1] + j * d[1]],
                                integ.nested_log_weights[i],
                            ));
                        }
                    }
                    out
                }
                Some(t) => {
                    let m = self.mode(t);
                    let s = m.spread;
                    let ldet = (s[0][0] * s[1][1]).ln();
                    integ
                        .nodes_2d
                        .iter()
                        .zip(&integ.log_weights_2d)
                        .map(|(&z, &lw)| {
                            let v = [
                                m.z[0] + s[0][0] * z[0],
                                m.z[1] + s[1][0] * z[0] + s[1][1] * z[1],
                            ];
                            let lr = 0.5 * (z[0] * z[0] + z[1] * z[1] - v[0] * v[0] - v[1] * v[1]);
                            (self.effect_at(v), lw + ldet + lr)
                        })
                        .collect()
                }
            },
        }
    }

    /// Whether clusters of this pattern get the recentred grid.
    pub fn adaptive_for_group(&self, group: usize) -> bool {
        match self.grid {
            EffectGrid::Discrete { .. } => false,
            EffectGrid::Bivariate { .. } => self.integ.settings.adaptive == AdaptiveMode::On,
            // the recentred rule is exact for a normal effect with normal errors
            _ if self.prep.outcome == OutcomeFamily::GaussianIdentity
                && self.integ.settings.adaptive == AdaptiveMode::Auto =>
            {
                true
            }
            _ => self.integ.settings.adaptive_for(self.prep.groups[group].n),
        }
    }

    /// `log ∫ exp(u·b - A_g(b)) dF(b)` (the `a` term excluded).
    fn log_integral(&self, t: &ClusterTerms, base: &mut BaseCache) -> f64 {
        if self.adaptive_for_group(t.group) {
            let nodes = self.nodes(Some(t));
            lse_iter(
                nodes
                    .iter()
                    .map(|&(b, lw)| lw + self.log_kernel(t.group, t.u, b)),
            )
        } else if self.uses_lines() {
            base.line_integral(self, t.group, t.u)
        } else {
            let (nodes, parts) = base.get(self, t.group);
            lse_iter(
                nodes
                    .iter()
                    .zip(parts)
                    .map(|(&(b, lw), &(k, rest))| lw + kernel(t.u, k, rest, b)),
            )
        }
    }

    /// Logistic kernels are piecewise linear along each line of the nested
    /// bivariate rule, which [`LineSums`] exploits.
    fn uses_lines(&self) -> bool {
        matches!(self.grid, EffectGrid::Bivariate { .. })
            && self.prep.outcome == OutcomeFamily::BernoulliLogit
    }

    /// [`Evaluator::partition_split`] for every node of the nested rule.
    /// Along a line each `x_t` is affine in the node index, so `exp(-|x_t|)`
    /// follows by repeated multiplication outward from the zero crossing;
    /// one logarithm per node remains.
    fn line_partitions(
        &self,
        group: usize,
        nodes: &[([f64; 2], f64)],
        lines: &[Range<usize>],
    ) -> Vec<([f64; 2], f64)> {
        let g = &self.prep.groups[group];
        let eta = &self.eta[group];
        let mut out = vec![([0.0, 0.0], 0.0); nodes.len()];
        let mut prod = vec![1.0; nodes.len()];
        let mut e = Vec::new();
        for line in lines {
            let (a, len) = (line.start, line.len());
            if len < 2 {
                for j in line.clone() {
                    out[j] = self.partition_split(group, nodes[j].0);
                }
                continue;
            }
            let b = nodes[a].0;
            let d = [nodes[a + 1].0[0] - b[0], nodes[a + 1].0[1] - b[1]];
            e.clear();
            e.resize(len, 0.0);
            for t in 0..g.n {
                let s = g.slope[t];
                let x = |j: usize| eta[t] + nodes[a + j].0[0] + nodes[a + j].0[1] * s;
                let x0 = x(0);
                let dx = d[0] + d[1] * s;
                for j in 0..len {
                    if x(j) > 0.0 {
                        let o = &mut out[a + j];
                        o.0[0] += 1.0;
                        o.0[1] += s;
                        o.1 += eta[t];
                    }
                }
                let q = (-dx.abs()).exp();
                let z = if dx == 0.0 { f64::INFINITY } else { -x0 / dx };
                let last = (len - 1) as f64;
                if z >= 0.0 {
                    // indices at or below the crossing
                    let jl = if z >= last {
                        len - 1
                    } else {
                        z.floor() as usize
                    };
                    for j in (0..=jl).rev() {
                        e[j] = if (jl - j) % REANCHOR == 0 {
                            (-x(j).abs()).exp()
                        } else {
                            e[j + 1] * q
                        };
                    }
                }
                if z <= last {
                    let jr = if z <= 0.0 { 0 } else { z.ceil() as usize };
                    for j in jr..len {
                        e[j] = if (j - jr) % REANCHOR == 0 {
                            (-x(j).abs()).exp()
                        } else {
                            e[j - 1] * q
                        };
                    }
                }
                for j in 0..len {
                    prod[a + j] *= 1.0 + e[j];
                }
            }
            for j in line.clone() {
                out[j].1 += prod[j].ln();
            }
        }
        out
    }

    /// Marginal log-likelihood of one input cluster.
    pub fn cluster_loglik(&self, original: usize) -> f64 {
        let t = self.terms(original);
        let mut base = BaseCache::default();
        t.a + self.log_integral(&t, &mut base)
    }

    /// Marginal log-likelihood of every input cluster, in input order.
    pub fn cluster_logliks(&self) -> Vec<f64> {
        let mut base = BaseCache::default();
        // clusters sharing (pattern, u) share the integral
        let mut seen: BTreeMap<(usize, u64, u64), f64> = BTreeMap::new();
        let mut out = vec![0.0; self.prep.clusters.len()];
        for c in &self.prep.clusters {
            let t = self.terms_of(c);
            let key = (t.group, bits(t.u[0]), bits(t.u[1]));
            let li = match seen.get(&key) {
                Some(&v) => v,
                None => {
                    let v = self.log_integral(&t, &mut base);
                    seen.insert(key, v);
                    v
                }
            };
            out[c.original] = t.a + li;
        }
        out
    }

    pub fn total(&self) -> f64 {
        let mut base = BaseCache::default();
        let mut acc = NeumaierSum::default();
        match self.prep.outcome {
            OutcomeFamily::BernoulliLogit => {
                for p in &self.prep.profiles {
                    let t = ClusterTerms {
                        a: 0.0,
                        u: p.u,
                        group: p.group,
                    };
                    acc.add(p.count as f64 * self.log_integral(&t, &mut base));
                }
                for (x, b) in self.prep.yx_total.iter().zip(&self.beta) {
                    acc.add(x * b);
                }
            }
            OutcomeFamily::GaussianIdentity => {
                for c in &self.prep.clusters {
                    let t = self.terms_of(c);
                    acc.add(t.a);
                    acc.add(self.log_integral(&t, &mut base));
                }
            }
        }
        acc.value()
    }
}

/// Non-adaptive grid and the partition term per pattern, filled lazily.
#[derive(Default)]
struct BaseCache {
    nodes: Option<Vec<([f64; 2], f64)>>,
    parts: BTreeMap<usize, Vec<([f64; 2], f64)>>,
    lines: BTreeMap<usize, LineSums>,
}

/// Runs of consecutive nodes on one inner line where the saturated set `k`
/// is constant. There the log integrand is `s_j + (u - k)·b_j` with
/// `b_j` affine in `j`, so each run sums by Horner's rule with one
/// exponential per profile instead of one per node.
struct LineSums {
    /// `(nodes, max s_j)` per run.
    runs: Vec<(Range<usize>, f64)>,
    /// `exp(s_j - max s)` within the node's run, `s_j = lw_j - rest_j`.
    scaled: Vec<f64>,
}

impl LineSums {
    fn new(
        nodes: &[([f64; 2], f64)],
        parts: &[([f64; 2], f64)],
        lines: &[Range<usize>],
    ) -> LineSums {
        let s: Vec<f64> = nodes.iter().zip(parts).map(|(n, p)| n.1 - p.1).collect();
        let mut runs = Vec::new();
        let mut scaled = vec![0.0; nodes.len()];
        for line in lines {
            let mut a = line.start;
            while a < line.end {
                let mut e = a + 1;
                while e < line.end && e - a < REANCHOR && parts[e].0 == parts[a].0 {
                    e += 1;
                }
                let top = s[a..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for j in a..e {
                    scaled[j] = (s[j] - top).exp();
                }
                runs.push((a..e, top));
                a = e;
            }
        }
        LineSums { runs, scaled }
    }

    fn log_integral(
        &self,
        u: [f64; 2],
        nodes: &[([f64; 2], f64)],
        parts: &[([f64; 2], f64)],
    ) -> f64 {
        let mut logs = Vec::with_capacity(self.runs.len());
        for (run, top) in &self.runs {
            let (a, e) = (run.start, run.end);
            let k = parts[a].0;
            let du = [u[0] - k[0], u[1] - k[1]];
            let lin = |j: usize| du[0] * nodes[j].0[0] + du[1] * nodes[j].0[1];
            if e - a == 1 {
                logs.push(top + lin(a) + self.scaled[a].ln());
                continue;
            }
            let step = [
                nodes[a + 1].0[0] - nodes[a].0[0],
                nodes[a + 1].0[1] - nodes[a].0[1],
            ];
            let c = du[0] * step[0] + du[1] * step[1];
            // anchor at the end with the larger linear term so the ratio is <= 1
            let mut acc = 0.0;
            let anchor = if c <= 0.0 {
                let r = c.exp();
                for j in (a..e).rev() {
                    acc = acc * r + self.scaled[j];
                }
                a
            } else {
                let r = (-c).exp();
                for j in a..e {
                    acc = acc * r + self.scaled[j];
                }
                e - 1
            };
            logs.push(top + lin(anchor) + acc.ln());
        }
        lse_iter(logs.iter().copied())
    }
}

impl BaseCache {
    fn get(
        &mut self,
        ev: &Evaluator<'_>,
        group: usize,
    ) -> (&[([f64; 2], f64)], &[([f64; 2], f64)]) {
        let nodes = self.nodes.get_or_insert_with(|| ev.nodes(None));
        let parts = self.parts.entry(group).or_insert_with(|| {
            if ev.uses_lines() {
                ev.line_partitions(group, nodes, &ev.integ.nested_lines)
            } else {
                nodes
                    .iter()
                    .map(|&(b, _)| ev.partition_split(group, b))
                    .collect()
            }
        });
        (nodes.as_slice(), parts.as_slice())
    }

    fn line_integral(&mut self, ev: &Evaluator<'_>, group: usize, u: [f64; 2]) -> f64 {
        self.get(ev, group);
        let nodes = self.nodes.as_deref().unwrap_or_default();
        let parts = &self.parts[&group];
        self.lines
            .entry(group)
            .or_insert_with(|| LineSums::new(nodes, parts, &ev.integ.nested_lines))
            .log_integral(u, nodes, parts)
    }
}

/// Exact exponentials every this many recursion steps keep rounding drift
/// near machine precision (finite-difference Hessians amplify it).
const REANCHOR: usize = 16;

fn kernel(u: [f64; 2], k: [f64; 2], rest: f64, b: [f64; 2]) -> f64 {
    let mut v = -rest;
    if u[0] != k[0] {
        v += (u[0] - k[0]) * b[0];
    }
    if u[1] != k[1] {
        v += (u[1] - k[1]) * b[1];
    }
    v
}

fn lse_iter<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Total marginal log-likelihood; 0 for a dataset without clusters.
pub fn total_loglik(
    data: &Dataset,
    model: &ModelSpec,
    theta: &ParamVector,
    settings: QuadSettings,
) -> Result<f64> {
    if data.clusters.is_empty() && data.covariate_names.len() == model.covariate_names.len() {
        return Ok(0.0);
    }
    let prep = Prepared::new(data, model)?;
    let integ = Integrator::new(settings)?;
    Ok(Evaluator::new(&prep, &integ, model, theta)?.total())
}

/// Marginal log-likelihood of a single cluster.
pub fn marginal_cluster_loglik(
    cluster: &Cluster,
    covariate_names: &[String],
    model: &ModelSpec,
    theta: &ParamVector,
    settings: QuadSettings,
) -> Result<f64> {
    let data = Dataset {
        covariate_names: covariate_names.to_vec(),
        clusters: vec![cluster.clone()],
        true_ranef: None,
    };
    total_loglik(&data, model, theta, settings)
}

/// `log f(y_i | b)` summed over the cluster's observations.
pub fn cluster_loglik_given_b(
    cluster: &Cluster,
    model: &ModelSpec,
    beta: &[f64],
    b: Effect,
    sigma_eps: f64,
) -> Result<f64> {
    if beta.len() != model.n_fixed() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} columns",
            beta.len(),
            model.n_fixed()
        )));
    }
    let slope = model.slope_index();
    let mut s = NeumaierSum::default();
    for (row, &y) in cluster.x.iter().zip(&cluster.y) {
        if row.len() + 1 != beta.len() {
            return Err(Error::Dimension("covariate row width".into()));
        }
        let mut eta = beta[0] + b.intercept();
        for (x, bj) in row.iter().zip(&beta[1..]) {
            eta += x * bj;
        }
        if let Some(k) = slope {
            eta += b.slope() * row[k];
        }
        s.add(match model.outcome {
            OutcomeFamily::BernoulliLogit => y * eta - log1pexp(eta),
            OutcomeFamily::GaussianIdentity => {
                let r = (y - eta) / sigma_eps;
                -0.5 * r * r - sigma_eps.ln() - LN_SQRT_2PI
            }
        });
    }
    Ok(s.value())
}
