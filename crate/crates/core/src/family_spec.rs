//! Text form of random-effects families, as used on the command line and in
//! scenario configs: `normal`, `exp`, `tukey(g=0.5,h=0.1)`, `tukey(free)`,
//! `tukey(g=free,h=0.1)`, `discrete(k=3)`, `discrete(at=-1:0:2,w=0.2:0.5:0.3)`,
//! `bvnormal`, `bvnormal(var0=5,varw=5,corr=0.9)`,
//! `bvmix(var0=5,varw=5,corr=0.9,center=2)` and
//! `bvmix(mu0=2,muw=2,s0=1,sw=1,rho=0.5)`.
//!
//! Parsing ignores case and whitespace.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ranef::RanefFamily;

/// A family together with which of its shape coordinates are estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct RanefSpec {
    pub family: RanefFamily,
    /// One flag per shape coordinate (see [`RanefFamily::shape_len`]).
    pub free_shape: Vec<bool>,
}

impl RanefSpec {
    pub fn fixed(family: RanefFamily) -> Self {
        let n = family.shape_len();
        RanefSpec {
            family,
            free_shape: vec![false; n],
        }
    }

    pub fn free(family: RanefFamily) -> Self {
        let n = family.shape_len();
        RanefSpec {
            family,
            free_shape: vec![true; n],
        }
    }

    pub fn n_free_shape(&self) -> usize {
        self.free_shape.iter().filter(|f| **f).count()
    }

    /// Short label used in output tables, e.g. `tukey-fixed`.
    pub fn label(&self) -> String {
        match &self.family {
            RanefFamily::TukeyGH { .. } => {
                if self.free_shape.iter().all(|f| *f) {
                    "tukey-free".into()
                } else if self.free_shape.iter().any(|f| *f) {
                    "tukey-partial".into()
                } else {
                    "tukey-fixed".into()
                }
            }
            RanefFamily::DiscreteK { locations, .. } => format!("discrete{}", locations.len()),
            other => other.name().into(),
        }
    }
}

impl fmt::Display for RanefSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            RanefFamily::TukeyGH { g, h } => {
                if self.free_shape.iter().all(|x| *x) {
                    write!(f, "tukey(free)")
                } else {
                    let gs = if self.free_shape[0] {
                        "free".to_string()
                    } else {
                        g.to_string()
                    };
                    let hs = if self.free_shape[1] {
                        "free".to_string()
                    } else {
                        h.to_string()
                    };
                    write!(f, "tukey(g={gs},h={hs})")
                }
            }
            RanefFamily::DiscreteK { locations, .. } if self.free_shape.iter().any(|x| *x) => {
                write!(f, "discrete(k={})", locations.len())
            }
            other => write!(f, "{other}"),
        }
    }
}

impl FromStr for RanefSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_family_spec(s)
    }
}

fn spec_err(input: &str, reason: impl Into<String>) -> Error {
    Error::FamilySpec {
        input: input.to_string(),
        reason: reason.into(),
    }
}

enum Arg {
    Flag(String),
    Pair(String, String),
}

fn number(input: &str, key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| spec_err(input, format!("`{key}` expects a number, got `{v}`")))
}

fn number_list(input: &str, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(':').map(|x| number(input, key, x)).collect()
}

pub fn parse_family_spec(input: &str) -> Result<RanefSpec> {
    let compact: String = input
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_lowercase();
    let (name, args) = match compact.find('(') {
        Some(open) => {
            if !compact.ends_with(')') {
                return Err(spec_err(input, "unbalanced parentheses"));
            }
            (&compact[..open], &compact[open + 1..compact.len() - 1])
        }
        None => (compact.as_str(), ""),
    };
    let mut parsed = Vec::new();
    for tok in args.split(',').filter(|t| !t.is_empty()) {
        match tok.split_once('=') {
            Some((k, v)) => parsed.push(Arg::Pair(k.to_string(), v.to_string())),
            None => parsed.push(Arg::Flag(tok.to_string())),
        }
    }
    let get = |key: &str| {
        parsed.iter().find_map(|a| match a {
            Arg::Pair(k, v) if k == key => Some(v.as_str()),
            _ => None,
        })
    };
    let check_keys = |allowed: &[&str]| -> Result<()> {
        for a in &parsed {
            let k = match a {
                Arg::Pair(k, _) | Arg::Flag(k) => k,
            };
            if !allowed.contains(&k.as_str()) {
                return Err(spec_err(
                    input,
                    format!("unknown argument `{k}` for {name}"),
                ));
            }
        }
        Ok(())
    };

    match name {
        "normal" | "gaussian" => {
            check_keys(&[])?;
            Ok(RanefSpec::fixed(RanefFamily::Normal))
        }
        "exp" | "exponential" => {
            check_keys(&[])?;
            Ok(RanefSpec::fixed(RanefFamily::CenteredExponential))
        }
        "tukey" => {
            check_keys(&["g", "h", "free"])?;
            let all_free = parsed.is_empty()
                || parsed
                    .iter()
                    .any(|a| matches!(a, Arg::Flag(f) if f == "free"));
            let mut g = 0.1;
            let mut h = 0.05;
            let mut free = [all_free, all_free];
            for (i, key) in ["g", "h"].iter().enumerate() {
                match get(key) {
                    Some("free") => free[i] = true,
                    Some(v) => {
                        let x = number(input, key, v)?;
                        if i == 0 {
                            g = x;
                        } else {
                            h = x;
                        }
                        free[i] = false;
                    }
                    None if !all_free => return Err(spec_err(input, format!("missing `{key}`"))),
                    None => {}
                }
            }
            Ok(RanefSpec {
                family: RanefFamily::TukeyGH { g, h },
                free_shape: free.to_vec(),
            })
        }
        "discrete" => {
            check_keys(&["k", "at", "w"])?;
            if let Some(k) = get("k") {
                let k: usize = k
                    .parse()
                    .map_err(|_| spec_err(input, "`k` expects an integer"))?;
                if k < 2 {
                    return Err(spec_err(input, "discrete needs k >= 2"));
                }
                return Ok(RanefSpec::free(RanefFamily::discrete_default(k)));
            }
            let at = get("at").ok_or_else(|| spec_err(input, "discrete needs `k` or `at`"))?;
            let locations = number_list(input, "at", at)?;
            if locations.len() < 2 {
                return Err(spec_err(
                    input,
                    "discrete needs at least two support points",
                ));
            }
            let weights = match get("w") {
                Some(w) => number_list(input, "w", w)?,
                None => vec![1.0; locations.len()],
            };
            if weights.len() != locations.len() || weights.iter().any(|w| !(*w > 0.0)) {
                return Err(spec_err(
                    input,
                    "`w` needs one positive weight per support point",
                ));
            }
            let last = weights[weights.len() - 1];
            let logit_weights = weights[..weights.len() - 1]
                .iter()
                .map(|w| (w / last).ln())
                .collect();
            Ok(RanefSpec::fixed(RanefFamily::DiscreteK {
                locations,
                logit_weights,
            }))
        }
        "bvnormal" => {
            check_keys(&["var0", "varw", "corr"])?;
            let var0 = get("var0")
                .map(|v| number(input, "var0", v))
                .transpose()?
                .unwrap_or(1.0);
            let varw = get("varw")
                .map(|v| number(input, "varw", v))
                .transpose()?
                .unwrap_or(1.0);
            let corr = get("corr")
                .map(|v| number(input, "corr", v))
                .transpose()?
                .unwrap_or(0.0);
            if !(var0 > 0.0 && varw > 0.0 && corr.abs() < 1.0) {
                return Err(spec_err(input, "need positive variances and |corr| < 1"));
            }
            Ok(RanefSpec::fixed(RanefFamily::BivariateNormal {
                log_sd_intercept: 0.5 * var0.ln(),
                log_sd_slope: 0.5 * varw.ln(),
                atanh_correlation: corr.atanh(),
            }))
        }
        "bvmix" => {
            check_keys(&[
                "var0", "varw", "corr", "center", "rho", "mu0", "muw", "s0", "sw",
            ])?;
            if get("mu0").is_some() {
                let val = |k: &str| -> Result<f64> {
                    number(
                        input,
                        k,
                        get(k).ok_or_else(|| spec_err(input, format!("missing `{k}`")))?,
                    )
                };
                let rho = val("rho")?;
                if rho.abs() >= 1.0 {
                    return Err(spec_err(input, "|rho| must be < 1"));
                }
                return Ok(RanefSpec::fixed(RanefFamily::BivariateNormalMixture {
                    component_centers: (val("mu0")?, val("muw")?),
                    component_sd: (val("s0")?, val("sw")?),
                    component_correlation: rho,
                }));
            }
            let val = |k: &str, default: f64| -> Result<f64> {
                get(k)
                    .map(|v| number(input, k, v))
                    .transpose()
                    .map(|v| v.unwrap_or(default))
            };
            let targets = MixtureTargets {
                var_intercept: val("var0", 5.0)?,
                var_slope: val("varw", 5.0)?,
                correlation: val("corr", 0.9)?,
                center_intercept: val("center", 2.0)?,
                component_correlation: match get("rho") {
                    None | Some("matched") => ComponentCorrelation::Matched,
                    Some("zero") => ComponentCorrelation::Zero,
                    Some(other) => {
                        return Err(spec_err(
                            input,
                            format!("rho must be matched|zero, got `{other}`"),
                        ))
                    }
                },
            };
            Ok(RanefSpec::fixed(bivariate_mixture_from_targets(&targets)?))
        }
        other => Err(spec_err(input, format!("unknown family `{other}`"))),
    }
}

/// How the within-component correlation of a two-component mixture is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentCorrelation {
    /// Chosen so the mixture has the target overall correlation.
    Matched,
    /// Independent coordinates inside each component.
    Zero,
}

/// Target moments for an equal-weight mixture of two bivariate normals at
/// `±(c0, cw)`, where `cw = c0 * sqrt(var_slope / var_intercept)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureTargets {
    pub var_intercept: f64,
    pub var_slope: f64,
    pub correlation: f64,
    pub center_intercept: f64,
    pub component_correlation: ComponentCorrelation,
}

/// Moment-match a symmetric two-component mixture.
///
/// Marginal variance is `s^2 + mu^2` per coordinate and the covariance is
/// `rho_c s0 sw + mu0 muw`; the slope coordinate is a uniform rescaling of the
/// intercept coordinate.
pub fn bivariate_mixture_from_targets(t: &MixtureTargets) -> Result<RanefFamily> {
    if !(t.var_intercept > 0.0 && t.var_slope > 0.0) {
        return Err(Error::InfeasibleMixture(
            "variances must be positive".into(),
        ));
    }
    let scale = (t.var_slope / t.var_intercept).sqrt();
    let mu0 = t.center_intercept;
    let muw = mu0 * scale;
    let s0_sq = t.var_intercept - mu0 * mu0;
    if !(s0_sq > 0.0) {
        return Err(Error::InfeasibleMixture(format!(
            "center {mu0} leaves no within-component variance for var {}",
            t.var_intercept
        )));
    }
    let s0 = s0_sq.sqrt();
    let sw = s0 * scale;
    let rho = match t.component_correlation {
        ComponentCorrelation::Zero => 0.0,
        ComponentCorrelation::Matched => {
            (t.correlation * (t.var_intercept * t.var_slope).sqrt() - mu0 * muw) / (s0 * sw)
        }
    };
    if !(rho.abs() < 1.0) {
        return Err(Error::InfeasibleMixture(format!(
            "component correlation {rho} outside (-1, 1)"
        )));
    }
    Ok(RanefFamily::BivariateNormalMixture {
        component_centers: (mu0, muw),
        component_sd: (s0, sw),
        component_correlation: rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_families() {
        assert_eq!(
            parse_family_spec("Normal").unwrap().family,
            RanefFamily::Normal
        );
        assert_eq!(
            parse_family_spec(" EXP ").unwrap().family,
            RanefFamily::CenteredExponential
        );
        let t = parse_family_spec("tukey( g = 0.5 , h = 0.1 )").unwrap();
        assert_eq!(t.family, RanefFamily::TukeyGH { g: 0.5, h: 0.1 });
        assert_eq!(t.free_shape, vec![false, false]);
        assert_eq!(t.label(), "tukey-fixed");
        let f = parse_family_spec("tukey(free)").unwrap();
        assert_eq!(f.free_shape, vec![true, true]);
        assert_eq!(f.family, RanefFamily::TukeyGH { g: 0.1, h: 0.05 });
        let p = parse_family_spec("tukey(g=free,h=0.2)").unwrap();
        assert_eq!(p.free_shape, vec![true, false]);
        let d = parse_family_spec("discrete(k=3)").unwrap();
        assert_eq!(d.free_shape.len(), 3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_family_spec("cauchy").is_err());
        assert!(parse_family_spec("tukey(g=0.5)").is_err());
        assert!(parse_family_spec("tukey(g=0.5,h=0.1,q=2)").is_err());
        assert!(parse_family_spec("tukey(g=0.5,h=0.1").is_err());
        assert!(parse_family_spec("discrete(k=1)").is_err());
    }

    #[test]
    fn display_round_trips() {
        for s in [
            "normal",
            "exp",
            "tukey(g=0.5,h=0.1)",
            "tukey(free)",
            "tukey(g=free,h=0.1)",
            "discrete(k=3)",
            "discrete(at=-1:0:2,w=0.2:0.5:0.3)",
            "bvnormal(var0=5,varw=0.08,corr=0.9)",
            "bvmix(var0=5,varw=5,corr=0.9,center=2)",
        ] {
            let spec = parse_family_spec(s).unwrap();
            let again = parse_family_spec(&spec.to_string()).unwrap();
            assert_eq!(spec.free_shape, again.free_shape, "{s}");
            assert_eq!(spec.family.name(), again.family.name(), "{s}");
            let a = spec.family.shape_coords();
            let b = again.family.shape_coords();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{s}");
            }
        }
    }

    #[test]
    fn mixture_moment_matching() {
        let t = MixtureTargets {
            var_intercept: 5.0,
            var_slope: 5.0,
            correlation: 0.9,
            center_intercept: 2.0,
            component_correlation: ComponentCorrelation::Matched,
        };
        match bivariate_mixture_from_targets(&t).unwrap() {
            RanefFamily::BivariateNormalMixture {
                component_centers,
                component_sd,
                component_correlation,
            } => {
                assert!((component_correlation - 0.5).abs() < 1e-12);
                assert_eq!(component_centers, (2.0, 2.0));
                assert!((component_sd.0 - 1.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        let small = MixtureTargets {
            var_slope: 0.08,
            ..t
        };
        match bivariate_mixture_from_targets(&small).unwrap() {
            RanefFamily::BivariateNormalMixture {
                component_centers, ..
            } => {
                assert!((component_centers.1 - 0.252_982_212_813_470_5).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        let infeasible = MixtureTargets {
            center_intercept: 3.0,
            ..t
        };
        assert!(bivariate_mixture_from_targets(&infeasible).is_err());
        let too_corr = MixtureTargets {
            correlation: -0.99,
            ..t
        };
        assert!(bivariate_mixture_from_targets(&too_corr).is_err());
    }
}
