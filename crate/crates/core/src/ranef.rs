//! Random-effects distributions: normal, centered exponential, Tukey(g,h),
//! discrete mass points, and the bivariate families used for random slopes.
//!
//! Every scalar family is reduced to mean 0 / variance 1 by [`standardize`]
//! and then multiplied by `sigma_b`. Continuous scalar families are also
//! expressed as a transform of a standard normal variate ([`ZMap`]), which is
//! how the likelihood integrates over them without ever evaluating a Tukey
//! density.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::special::{
    integrate_adaptive, std_normal_cdf, std_normal_log_pdf, std_normal_pdf, std_normal_sf,
    LN_SQRT_2PI,
};

/// Parameters below this magnitude switch to the analytic limit.
pub const LIMIT_EPS: f64 = 1e-8;

/// Range of the moment quadrature in z.
const MOMENT_Z_RANGE: f64 = 12.0;

/// Tukey `h` is mapped from an unconstrained coordinate `u` as
/// `H_CENTER + H_HALF_WIDTH * tanh(u)`, i.e. into (-0.95, 0.45).
pub const TUKEY_H_CENTER: f64 = -0.25;
pub const TUKEY_H_HALF_WIDTH: f64 = 0.70;

#[derive(Debug, Clone, PartialEq)]
pub enum RanefFamily {
    Normal,
    /// `Exp(1)` before standardization, i.e. `b = sigma_b * (E - 1)`.
    CenteredExponential,
    TukeyGH {
        g: f64,
        h: f64,
    },
    /// Raw support points with `K - 1` logits; the last category has logit 0.
    DiscreteK {
        locations: Vec<f64>,
        logit_weights: Vec<f64>,
    },
    BivariateNormal {
        log_sd_intercept: f64,
        log_sd_slope: f64,
        atanh_correlation: f64,
    },
    /// Equal-weight mixture of two bivariate normals centered at
    /// `±component_centers`.
    BivariateNormalMixture {
        component_centers: (f64, f64),
        component_sd: (f64, f64),
        component_correlation: f64,
    },
}

/// A realized random effect: intercept only, or intercept and slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Effect {
    Scalar(f64),
    Pair(f64, f64),
}

impl Effect {
    pub fn intercept(&self) -> f64 {
        match *self {
            Effect::Scalar(b) | Effect::Pair(b, _) => b,
        }
    }

    pub fn slope(&self) -> f64 {
        match *self {
            Effect::Scalar(_) => 0.0,
            Effect::Pair(_, w) => w,
        }
    }

    pub fn components(&self) -> Vec<f64> {
        match *self {
            Effect::Scalar(b) => vec![b],
            Effect::Pair(b, w) => vec![b, w],
        }
    }
}

/// Tukey(g,h) transform `((e^{gz} - 1)/g) e^{h z^2 / 2}`.
pub fn tukey_transform(z: f64, g: f64, h: f64) -> f64 {
    let skew = if g.abs() < LIMIT_EPS {
        // first-order term keeps the switch continuous to O(g^2)
        z * (1.0 + 0.5 * g * z)
    } else {
        (g * z).exp_m1() / g
    };
    if h.abs() < LIMIT_EPS {
        skew
    } else {
        skew * (0.5 * h * z * z).exp()
    }
}

/// Quantile of Exp(1) at Φ(z), i.e. `-log(1 - Φ(z))`.
pub fn exp_quantile_of_normal(z: f64) -> f64 {
    if z < 0.0 {
        -(-std_normal_cdf(z)).ln_1p()
    } else {
        -std_normal_sf(z).ln()
    }
}

fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = logits.to_vec();
    all.push(0.0);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = all.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

impl RanefFamily {
    pub fn name(&self) -> &'static str {
        match self {
            RanefFamily::Normal => "normal",
            RanefFamily::CenteredExponential => "exp",
            RanefFamily::TukeyGH { .. } => "tukey",
            RanefFamily::DiscreteK { .. } => "discrete",
            RanefFamily::BivariateNormal { .. } => "bvnormal",
            RanefFamily::BivariateNormalMixture { .. } => "bvmix",
        }
    }

    pub fn is_bivariate(&self) -> bool {
        matches!(
            self,
            RanefFamily::BivariateNormal { .. } | RanefFamily::BivariateNormalMixture { .. }
        )
    }

    pub fn is_continuous_scalar(&self) -> bool {
        matches!(
            self,
            RanefFamily::Normal | RanefFamily::CenteredExponential | RanefFamily::TukeyGH { .. }
        )
    }

    /// Discrete family with `k` equally spaced points and uniform weights.
    pub fn discrete_default(k: usize) -> RanefFamily {
        RanefFamily::DiscreteK {
            locations: (0..k).map(|j| j as f64).collect(),
            logit_weights: vec![0.0; k.saturating_sub(1)],
        }
    }

    /// Softmax weights of a discrete family (empty for the other families).
    pub fn discrete_weights(&self) -> Vec<f64> {
        match self {
            RanefFamily::DiscreteK { logit_weights, .. } => softmax_with_reference(logit_weights),
            _ => Vec::new(),
        }
    }

    /// `E[T^order]` of the unstandardized variate `T`.
    ///
    /// Continuous families integrate `τ(z)^order φ(z)` over `[-12, 12]`;
    /// the discrete family sums over its support.
    pub fn raw_moment(&self, order: u32) -> Result<f64> {
        match self {
            RanefFamily::Normal => Ok(match order {
                0 => 1.0,
                k if k % 2 == 1 => 0.0,
                k => (1..k).step_by(2).map(|j| j as f64).product(),
            }),
            RanefFamily::CenteredExponential => Ok((1..=order).map(f64::from).product()),
            &RanefFamily::TukeyGH { g, h } => {
                if order > 0 && h >= 1.0 / f64::from(order) {
                    return Err(Error::MomentNonexistent { order, g, h });
                }
                let f = |z: f64| tukey_transform(z, g, h).powi(order as i32) * std_normal_pdf(z);
                Ok(integrate_adaptive(
                    f,
                    -MOMENT_Z_RANGE,
                    MOMENT_Z_RANGE,
                    1e-300,
                    1e-13,
                ))
            }
            RanefFamily::DiscreteK { locations, .. } => {
                let w = self.discrete_weights();
                Ok(locations
                    .iter()
                    .zip(&w)
                    .map(|(l, p)| p * l.powi(order as i32))
                    .sum())
            }
            _ => Err(Error::UnsupportedFamily {
                family: self.name().into(),
                what: "scalar moments",
            }),
        }
    }

    /// Mean, variance, skewness and raw (non-excess) kurtosis.
    pub fn moment_summary(&self) -> Result<[f64; 4]> {
        let m1 = self.raw_moment(1)?;
        let m2 = self.raw_moment(2)?;
        let var = m2 - m1 * m1;
        let m3 = self.raw_moment(3)?;
        let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
        let m4 = self.raw_moment(4)?;
        let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
        Ok([m1, var, c3 / var.powf(1.5), c4 / (var * var)])
    }

    /// Number of shape coordinates a fitted version of this family carries.
    pub fn shape_len(&self) -> usize {
        match self {
            RanefFamily::TukeyGH { .. } => 2,
            RanefFamily::DiscreteK { locations, .. } => {
                let k = locations.len();
                (k - 1) + k.saturating_sub(2)
            }
            _ => 0,
        }
    }

    pub fn shape_names(&self) -> Vec<String> {
        match self {
            RanefFamily::TukeyGH { .. } => vec!["tukey_g".into(), "tukey_h_unconstrained".into()],
            RanefFamily::DiscreteK { locations, .. } => {
                let k = locations.len();
                let mut v: Vec<String> = (1..k).map(|j| format!("discrete_logit_w{j}")).collect();
                v.extend((2..k).map(|j| format!("discrete_log_gap{j}")));
                v
            }
            _ => Vec::new(),
        }
    }

    /// Unconstrained shape coordinates.
    ///
    /// Tukey: `(g, atanh((h - H_CENTER) / H_HALF_WIDTH))`. Discrete: logits,
    /// then log gaps between sorted support points after rescaling the first
    /// gap to 1 (standardization removes location and scale).
    pub fn shape_coords(&self) -> Vec<f64> {
        match self {
            &RanefFamily::TukeyGH { g, h } => {
                let r = ((h - TUKEY_H_CENTER) / TUKEY_H_HALF_WIDTH)
                    .clamp(-0.999_999_999, 0.999_999_999);
                vec![g, r.atanh()]
            }
            RanefFamily::DiscreteK { locations, .. } => {
                let w = self.discrete_weights();
                let mut pairs: Vec<(f64, f64)> = locations.iter().copied().zip(w).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let k = pairs.len();
                let last = pairs[k - 1].1;
                let mut coords: Vec<f64> =
                    pairs[..k - 1].iter().map(|p| (p.1 / last).ln()).collect();
                let unit = pairs[1].0 - pairs[0].0;
                for j in 1..k - 1 {
                    coords.push(((pairs[j + 1].0 - pairs[j].0) / unit).ln());
                }
                coords
            }
            _ => Vec::new(),
        }
    }

    /// Inverse of [`shape_coords`](Self::shape_coords) for this family's shape.
    pub fn with_shape_coords(&self, coords: &[f64]) -> RanefFamily {
        match self {
            RanefFamily::TukeyGH { .. } => RanefFamily::TukeyGH {
                g: coords[0],
                h: TUKEY_H_CENTER + TUKEY_H_HALF_WIDTH * coords[1].tanh(),
            },
            RanefFamily::DiscreteK { locations, .. } => {
                let k = locations.len();
                let logit_weights = coords[..k - 1].to_vec();
                let mut locs = Vec::with_capacity(k);
                locs.push(0.0);
                locs.push(1.0);
                for j in 0..k.saturating_sub(2) {
                    let prev = locs[locs.len() - 1];
                    locs.push(prev + coords[k - 1 + j].exp());
                }
                locs.truncate(k);
                RanefFamily::DiscreteK {
                    locations: locs,
                    logit_weights,
                }
            }
            other => other.clone(),
        }
    }

    /// Lower-triangular Cholesky factor of a bivariate normal covariance.
    pub fn bivariate_cholesky(&self) -> Option<[[f64; 2]; 2]> {
        match *self {
            RanefFamily::BivariateNormal {
                log_sd_intercept,
                log_sd_slope,
                atanh_correlation,
            } => {
                let s0 = log_sd_intercept.exp();
                let s1 = log_sd_slope.exp();
                let rho = atanh_correlation.tanh();
                Some([[s0, 0.0], [s1 * rho, s1 * (1.0 - rho * rho).sqrt()]])
            }
            _ => None,
        }
    }
}

impl fmt::Display for RanefFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RanefFamily::Normal => write!(f, "normal"),
            RanefFamily::CenteredExponential => write!(f, "exp"),
            RanefFamily::TukeyGH { g, h } => write!(f, "tukey(g={g},h={h})"),
            RanefFamily::DiscreteK {
                locations,
                logit_weights,
            } => {
                let at: Vec<String> = locations.iter().map(|l| l.to_string()).collect();
                let w: Vec<String> = softmax_with_reference(logit_weights)
                    .iter()
                    .map(|p| p.to_string())
                    .collect();
                write!(f, "discrete(at={},w={})", at.join(":"), w.join(":"))
            }
            RanefFamily::BivariateNormal {
                log_sd_intercept,
                log_sd_slope,
                atanh_correlation,
            } => write!(
                f,
                "bvnormal(var0={},varw={},corr={})",
                (2.0 * log_sd_intercept).exp(),
                (2.0 * log_sd_slope).exp(),
                atanh_correlation.tanh()
            ),
            RanefFamily::BivariateNormalMixture {
                component_centers,
                component_sd,
                component_correlation,
            } => write!(
                f,
                "bvmix(mu0={},muw={},s0={},sw={},rho={})",
                component_centers.0,
                component_centers.1,
                component_sd.0,
                component_sd.1,
                component_correlation
            ),
        }
    }
}

/// A family shifted and scaled to mean 0, variance `sigma_b^2`.
///
/// Bivariate families are carried with shift 0 and divisor 1; their scale
/// lives in the family parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedRanef {
    pub family: RanefFamily,
    pub location_shift: f64,
    pub scale_divisor: f64,
    pub sigma_b: f64,
}

pub fn standardize(family: &RanefFamily, sigma_b: f64) -> Result<StandardizedRanef> {
    let (location_shift, scale_divisor) = match family {
        RanefFamily::Normal => (0.0, 1.0),
        RanefFamily::CenteredExponential => (1.0, 1.0),
        RanefFamily::TukeyGH { .. } | RanefFamily::DiscreteK { .. } => {
            let m1 = family.raw_moment(1)?;
            let m2 = family.raw_moment(2)?;
            let var = m2 - m1 * m1;
            if !(var > 0.0) {
                return Err(Error::UnsupportedFamily {
                    family: family.name().into(),
                    what: "standardization of a degenerate distribution",
                });
            }
            (m1, var.sqrt())
        }
        RanefFamily::BivariateNormal { .. } | RanefFamily::BivariateNormalMixture { .. } => {
            (0.0, 1.0)
        }
    };
    Ok(StandardizedRanef {
        family: family.clone(),
        location_shift,
        scale_divisor,
        sigma_b,
    })
}

/// Map from a standard normal `z` to the random effect `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZMap {
    kind: ZKind,
    sigma_b: f64,
    shift: f64,
    divisor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ZKind {
    Identity,
    Exponential,
    Tukey { g: f64, h: f64 },
}

impl ZMap {
    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ZKind::Identity | ZKind::Tukey { g: 0.0, h: 0.0 })
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        let t = match self.kind {
            ZKind::Identity => z,
            ZKind::Exponential => exp_quantile_of_normal(z),
            ZKind::Tukey { g, h } => tukey_transform(z, g, h),
        };
        self.sigma_b * (t - self.shift) / self.divisor
    }

    /// `(b(z), b'(z), b''(z))`.
    pub fn eval_with_derivatives(&self, z: f64) -> (f64, f64, f64) {
        let (t, d1, d2) = match self.kind {
            ZKind::Identity => (z, 1.0, 0.0),
            ZKind::Exponential => {
                let t = exp_quantile_of_normal(z);
                // hazard of the standard normal
                let r = (std_normal_log_pdf(z) + t).exp();
                (t, r, r * (r - z))
            }
            ZKind::Tukey { g, h } => {
                let (s, s1, s2) = if g.abs() < LIMIT_EPS {
                    (z * (1.0 + 0.5 * g * z), 1.0 + g * z, g)
                } else {
                    let e = (g * z).exp();
                    ((g * z).exp_m1() / g, e, g * e)
                };
                let e = (0.5 * h * z * z).exp();
                let e1 = h * z * e;
                let e2 = (h + h * h * z * z) * e;
                (s * e, s1 * e + s * e1, s2 * e + 2.0 * s1 * e1 + s * e2)
            }
        };
        let k = self.sigma_b / self.divisor;
        (k * (t - self.shift), k * d1, k * d2)
    }
}

impl StandardizedRanef {
    pub fn is_bivariate(&self) -> bool {
        self.family.is_bivariate()
    }

    /// `b(z) = sigma_b (τ(z) - shift) / divisor` for continuous scalar families.
    pub fn z_representation(&self) -> Result<ZMap> {
        let kind = match self.family {
            RanefFamily::Normal => ZKind::Identity,
            RanefFamily::CenteredExponential => ZKind::Exponential,
            RanefFamily::TukeyGH { g, h } => ZKind::Tukey { g, h },
            _ => {
                return Err(Error::UnsupportedFamily {
                    family: self.family.name().into(),
                    what: "z-space representation",
                })
            }
        };
        Ok(ZMap {
            kind,
            sigma_b: self.sigma_b,
            shift: self.location_shift,
            divisor: self.scale_divisor,
        })
    }

    /// Support points `b_j` and probabilities of a discrete family.
    pub fn discrete_support(&self) -> Option<Vec<(f64, f64)>> {
        match &self.family {
            RanefFamily::DiscreteK { locations, .. } => {
                let w = self.family.discrete_weights();
                Some(
                    locations
                        .iter()
                        .zip(w)
                        .map(|(l, p)| {
                            (
                                self.sigma_b * (l - self.location_shift) / self.scale_divisor,
                                p,
                            )
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// `log f_b(b)` for families with a closed-form density or mass function.
    pub fn log_density(&self, b: f64) -> Result<f64> {
        let s = self.sigma_b;
        match &self.family {
            RanefFamily::Normal => Ok(-0.5 * (b / s).powi(2) - s.ln() - LN_SQRT_2PI),
            RanefFamily::CenteredExponential => {
                let e = b / s + 1.0;
                if e < 0.0 {
                    Ok(f64::NEG_INFINITY)
                } else {
                    Ok(-e - s.ln())
                }
            }
            RanefFamily::DiscreteK { .. } => {
                let support = self.discrete_support().expect("discrete");
                Ok(support
                    .iter()
                    .find(|(bj, _)| (b - bj).abs() <= 1e-12 * (1.0 + bj.abs()))
                    .map_or(f64::NEG_INFINITY, |(_, p)| p.ln()))
            }
            other => Err(Error::UnsupportedFamily {
                family: other.name().into(),
                what: "closed-form log density",
            }),
        }
    }

    /// One draw. Continuous scalar families consume two stream outputs
    /// (one normal), the discrete family one, the bivariate normal four and
    /// the mixture five.
    pub fn sample(&self, rng: &mut CounterRng) -> Effect {
        match &self.family {
            RanefFamily::Normal
            | RanefFamily::CenteredExponential
            | RanefFamily::TukeyGH { .. } => {
                let z = rng.normal();
                Effect::Scalar(self.z_representation().expect("continuous").eval(z))
            }
            RanefFamily::DiscreteK { .. } => {
                let u = rng.uniform();
                let support = self.discrete_support().expect("discrete");
                let mut acc = 0.0;
                for &(b, p) in &support {
                    acc += p;
                    if u < acc {
                        return Effect::Scalar(b);
                    }
                }
                Effect::Scalar(support[support.len() - 1].0)
            }
            RanefFamily::BivariateNormal { .. } => {
                let l = self.family.bivariate_cholesky().expect("bivariate");
                let z1 = rng.normal();
                let z2 = rng.normal();
                Effect::Pair(l[0][0] * z1, l[1][0] * z1 + l[1][1] * z2)
            }
            &RanefFamily::BivariateNormalMixture {
                component_centers: (m0, mw),
                component_sd: (s0, sw),
                component_correlation: rho,
            } => {
                let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                let z1 = rng.normal();
                let z2 = rng.normal();
                Effect::Pair(
                    sign * m0 + s0 * z1,
                    sign * mw + sw * (rho * z1 + (1.0 - rho * rho).sqrt() * z2),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::sample_moments;

    #[test]
    fn z_map_derivatives_match_differences() {
        let maps = [
            standardize(&RanefFamily::Normal, 1.3).unwrap(),
            standardize(&RanefFamily::CenteredExponential, 0.7).unwrap(),
            standardize(&RanefFamily::TukeyGH { g: 0.5, h: 0.1 }, 1.0).unwrap(),
            standardize(&RanefFamily::TukeyGH { g: 0.0, h: -0.3 }, 2.0).unwrap(),
        ];
        for m in &maps {
            let zm = m.z_representation().unwrap();
            for z in [-3.0, -0.4, 0.0, 0.9, 2.5] {
                let (b, d1, d2) = zm.eval_with_derivatives(z);
                let e = 1e-5;
                assert!((b - zm.eval(z)).abs() < 1e-14);
                let fd1 = (zm.eval(z + e) - zm.eval(z - e)) / (2.0 * e);
                let fd2 = (zm.eval(z + e) - 2.0 * b + zm.eval(z - e)) / (e * e);
                assert!((d1 - fd1).abs() < 1e-7 * (1.0 + d1.abs()), "{m:?} {z}");
                assert!((d2 - fd2).abs() < 1e-3 * (1.0 + d2.abs()), "{m:?} {z}");
            }
        }
    }

    #[test]
    fn tukey_transform_values() {
        assert_eq!(tukey_transform(0.0, 0.5, 0.1), 0.0);
        assert!((tukey_transform(1.0, 0.5, 0.1) - 1.363_963_842_982_742_5).abs() < 1e-14);
        for z in [-3.0, -0.2, 0.0, 1.7, 6.0] {
            assert_eq!(tukey_transform(z, 0.0, 0.0), z);
        }
    }

    #[test]
    fn tukey_limit_is_continuous() {
        let (z, g, h): (f64, f64, f64) = (2.5, 0.9e-8, 0.1);
        let direct = (g * z).exp_m1() / g * (0.5 * h * z * z).exp();
        assert!((tukey_transform(z, g, h) - direct).abs() < 1e-14);
    }

    #[test]
    fn moment_nonexistence() {
        let fam = RanefFamily::TukeyGH { g: 0.0, h: 0.6 };
        assert!(fam.raw_moment(1).is_ok());
        assert!(matches!(
            fam.raw_moment(2),
            Err(Error::MomentNonexistent { order: 2, .. })
        ));
        assert!(standardize(&fam, 1.0).is_err());
    }

    #[test]
    fn exponential_and_normal_moments() {
        assert_eq!(RanefFamily::CenteredExponential.raw_moment(1).unwrap(), 1.0);
        assert_eq!(RanefFamily::CenteredExponential.raw_moment(3).unwrap(), 6.0);
        assert_eq!(RanefFamily::Normal.raw_moment(4).unwrap(), 3.0);
        let s = RanefFamily::Normal.moment_summary().unwrap();
        assert_eq!(s, [0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn standardize_shifts() {
        let n = standardize(&RanefFamily::Normal, 1.0).unwrap();
        assert_eq!((n.location_shift, n.scale_divisor), (0.0, 1.0));
        let e = standardize(&RanefFamily::CenteredExponential, 2.0).unwrap();
        assert_eq!((e.location_shift, e.scale_divisor), (1.0, 1.0));
        let t = standardize(&RanefFamily::TukeyGH { g: 0.5, h: 0.1 }, 1.0).unwrap();
        assert!((t.location_shift - 0.31).abs() < 0.005);
        assert!((t.scale_divisor - 2.27f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn z_representation_examples() {
        let n = standardize(&RanefFamily::Normal, 2.0).unwrap();
        assert_eq!(n.z_representation().unwrap().eval(1.5), 3.0);
        let e = standardize(&RanefFamily::CenteredExponential, 1.0).unwrap();
        assert!((e.z_representation().unwrap().eval(0.0) - (2f64.ln() - 1.0)).abs() < 1e-14);
        let t = standardize(&RanefFamily::TukeyGH { g: 0.5, h: 0.1 }, 1.0).unwrap();
        assert!((t.z_representation().unwrap().eval(0.0) + 0.208_409_767_674_304_8).abs() < 1e-9);
        let d = standardize(&RanefFamily::discrete_default(3), 1.0).unwrap();
        assert!(d.z_representation().is_err());
    }

    #[test]
    fn log_density_examples() {
        let n = standardize(&RanefFamily::Normal, 1.0).unwrap();
        assert!((n.log_density(0.0).unwrap() + LN_SQRT_2PI).abs() < 1e-15);
        let e = standardize(&RanefFamily::CenteredExponential, 1.0).unwrap();
        assert_eq!(e.log_density(-1.5).unwrap(), f64::NEG_INFINITY);
        assert!((e.log_density(0.0).unwrap() + 1.0).abs() < 1e-15);
        let t = standardize(&RanefFamily::TukeyGH { g: 0.5, h: 0.1 }, 1.0).unwrap();
        assert!(t.log_density(0.0).is_err());
    }

    #[test]
    fn discrete_support_and_sampling() {
        let fam = RanefFamily::DiscreteK {
            locations: vec![-1.0, 0.0, 2.0],
            logit_weights: vec![0.3, 0.9],
        };
        let w = fam.discrete_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&p| p > 0.0 && p < 1.0));
        let sd = standardize(&fam, 1.0).unwrap();
        let support: Vec<f64> = sd.discrete_support().unwrap().iter().map(|s| s.0).collect();
        let mut rng = CounterRng::new(11);
        for _ in 0..2000 {
            let b = sd.sample(&mut rng).intercept();
            assert!(support.iter().any(|s| (s - b).abs() < 1e-15));
        }
        // standardized support has mean 0 and variance 1
        let mean: f64 = sd
            .discrete_support()
            .unwrap()
            .iter()
            .map(|(b, p)| b * p)
            .sum();
        let var: f64 = sd
            .discrete_support()
            .unwrap()
            .iter()
            .map(|(b, p)| b * b * p)
            .sum();
        assert!(mean.abs() < 1e-14 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_coordinates_round_trip() {
        let t = RanefFamily::TukeyGH { g: 0.5, h: 0.1 };
        let back = t.with_shape_coords(&t.shape_coords());
        match back {
            RanefFamily::TukeyGH { g, h } => {
                assert!((g - 0.5).abs() < 1e-14 && (h - 0.1).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        let d = RanefFamily::DiscreteK {
            locations: vec![-1.0, 0.0, 2.0],
            logit_weights: vec![0.3, 0.9],
        };
        let rebuilt = d.with_shape_coords(&d.shape_coords());
        let a = standardize(&d, 1.0).unwrap().discrete_support().unwrap();
        let b = standardize(&rebuilt, 1.0)
            .unwrap()
            .discrete_support()
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn bivariate_correlation_in_range() {
        for a in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            let fam = RanefFamily::BivariateNormal {
                log_sd_intercept: 0.0,
                log_sd_slope: 0.0,
                atanh_correlation: a,
            };
            let l = fam.bivariate_cholesky().unwrap();
            assert!(l[1][0].abs() <= 1.0);
        }
    }

    #[test]
    fn sampled_tukey_matches_moments() {
        let sd = standardize(&RanefFamily::TukeyGH { g: 0.5, h: 0.1 }, 1.0).unwrap();
        let mut rng = CounterRng::new(5);
        let xs: Vec<f64> = (0..400_000)
            .map(|_| sd.sample(&mut rng).intercept())
            .collect();
        let m = sample_moments(&xs);
        assert!(m[0].abs() < 0.01, "{m:?}");
        assert!((m[1] - 1.0).abs() < 0.03, "{m:?}");
    }
}
