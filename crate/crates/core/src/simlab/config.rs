//! Scenario config files: `key = value` lines, `#` comments, comma-separated
//! arrays (commas inside parentheses do not split).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::family_spec::{parse_family_spec, RanefSpec};
use crate::likelihood::{AdaptiveMode, QuadSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateScheme {
    /// Between-cluster binary (first 25% of clusters) and a within-cluster
    /// covariate equally spaced on [0, 1].
    WithinBetween,
    /// Binary `z` (first half of clusters) and times 0, 1, 2, 4, 6, 8.
    SlopesDesign,
    /// Visit 0..n-1, mostly-between BMI and HTN, as in a longitudinal cohort.
    HersLike,
}

impl CovariateScheme {
    pub fn name(self) -> &'static str {
        match self {
            CovariateScheme::WithinBetween => "within_between",
            CovariateScheme::SlopesDesign => "slopes_design",
            CovariateScheme::HersLike => "hers",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "within_between" => Some(CovariateScheme::WithinBetween),
            "slopes_design" => Some(CovariateScheme::SlopesDesign),
            "hers" => Some(CovariateScheme::HersLike),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub m: usize,
    pub cluster_sizes: Vec<usize>,
    /// Intercept first.
    pub true_betas: Vec<f64>,
    pub sigma_b: f64,
    pub true_family: RanefSpec,
    pub fitted_families: Vec<RanefSpec>,
    /// Normalized source text of the families, re-emitted verbatim so a
    /// round trip reproduces the parsed values bit for bit.
    pub true_family_text: String,
    pub fitted_family_texts: Vec<String>,
    pub n_replications: usize,
    pub base_seed: u64,
    pub covariate_scheme: CovariateScheme,
    pub quad: QuadSettings,
    /// Replications under `--desk`.
    pub desk_replications: usize,
    /// Cluster sizes at which free-shape fits are skipped under `--desk`.
    pub desk_skip_free_sizes: Vec<usize>,
}

pub const ALL_SIZES: [usize; 6] = [2, 4, 6, 10, 20, 40];
pub const SLOPE_TIMES: [f64; 6] = [0.0, 1.0, 2.0, 4.0, 6.0, 8.0];

const KEYS: [&str; 14] = [
    "m",
    "cluster_sizes",
    "true_betas",
    "sigma_b",
    "true_family",
    "fitted_families",
    "n_replications",
    "base_seed",
    "covariate_scheme",
    "quad_points",
    "quad_points_2d",
    "quad_adaptive",
    "desk_replications",
    "desk_skip_free_sizes",
];

/// Split on commas that are not inside parentheses.
pub fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

pub(crate) fn normalize(spec: &str) -> String {
    spec.chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_lowercase()
}

pub(crate) struct Entry {
    pub line: usize,
    pub value: String,
}

pub(crate) fn cfg_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        reason: reason.into(),
    }
}

/// `key = value` lines keyed by lower-cased key; unknown and duplicate keys
/// are errors.
pub(crate) fn parse_entries(text: &str, keys: &[&str]) -> Result<BTreeMap<String, Entry>> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim().to_lowercase();
        if !keys.contains(&key.as_str()) {
            return Err(cfg_err(line, format!("unknown key `{key}`")));
        }
        if entries.contains_key(&key) {
            return Err(cfg_err(line, format!("duplicate key `{key}`")));
        }
        entries.insert(
            key,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }
    Ok(entries)
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let entries = parse_entries(text, &KEYS)?;

        let required = |k: &str| {
            entries
                .get(k)
                .ok_or_else(|| Error::MissingKey(k.to_string()))
        };
        fn uint(e: &Entry, key: &str) -> Result<usize> {
            e.value.parse().map_err(|_| {
                cfg_err(
                    e.line,
                    format!("`{key}` expects a non-negative integer, got `{}`", e.value),
                )
            })
        }
        fn uints(e: &Entry, key: &str) -> Result<Vec<usize>> {
            split_top_level(&e.value)
                .iter()
                .map(|v| {
                    v.parse().map_err(|_| {
                        cfg_err(e.line, format!("`{key}` expects integers, got `{v}`"))
                    })
                })
                .collect()
        }
        fn real(e: &Entry, key: &str) -> Result<f64> {
            e.value.parse().map_err(|_| {
                cfg_err(
                    e.line,
                    format!("`{key}` expects a number, got `{}`", e.value),
                )
            })
        }

        let m_entry = required("m")?;
        let m = uint(m_entry, "m")?;
        if m < 2 {
            return Err(cfg_err(m_entry.line, "m must be at least 2"));
        }
        let scheme_entry = required("covariate_scheme")?;
        let covariate_scheme = CovariateScheme::parse(&scheme_entry.value.to_lowercase())
            .ok_or_else(|| {
                cfg_err(
                    scheme_entry.line,
                    format!(
                        "unknown covariate_scheme `{}` (within_between|slopes_design|hers)",
                        scheme_entry.value
                    ),
                )
            })?;
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
        let expected_betas = match covariate_scheme {
            CovariateScheme::WithinBetween | CovariateScheme::SlopesDesign => 3,
            CovariateScheme::HersLike => 4,
        };
        if true_betas.len() != expected_betas {
            return Err(cfg_err(
                betas_entry.line,
                format!(
                    "{} needs {expected_betas} true_betas (intercept first)",
                    covariate_scheme.name()
                ),
            ));
        }
        let family_entry = required("true_family")?;
        let true_family = parse_family_spec(&family_entry.value)
            .map_err(|e| cfg_err(family_entry.line, e.to_string()))?;
        let fitted_entry = required("fitted_families")?;
        let fitted_family_texts: Vec<String> = split_top_level(&fitted_entry.value)
            .iter()
            .map(|v| normalize(v))
            .collect();
        let fitted_families: Vec<RanefSpec> = fitted_family_texts
            .iter()
            .map(|v| parse_family_spec(v).map_err(|e| cfg_err(fitted_entry.line, e.to_string())))
            .collect::<Result<_>>()?;
        if fitted_families.is_empty() {
            return Err(cfg_err(fitted_entry.line, "fitted_families is empty"));
        }
        let slopes = covariate_scheme == CovariateScheme::SlopesDesign;
        if slopes != true_family.family.is_bivariate() {
            return Err(cfg_err(
                family_entry.line,
                "slopes_design needs a bivariate true family (bvnormal or bvmix) and other schemes a scalar one",
            ));
        }
        for f in &fitted_families {
            if slopes && !matches!(f.family, crate::ranef::RanefFamily::BivariateNormal { .. }) {
                return Err(cfg_err(
                    fitted_entry.line,
                    "slopes_design fits the bvnormal family",
                ));
            }
            if !slopes && f.family.is_bivariate() {
                return Err(cfg_err(
                    fitted_entry.line,
                    "bivariate fitted family needs slopes_design",
                ));
            }
        }

        let cluster_sizes = match entries.get("cluster_sizes") {
            Some(e) => {
                let v = uints(e, "cluster_sizes")?;
                if v.is_empty() || v.contains(&0) {
                    return Err(cfg_err(e.line, "cluster sizes must be at least 1"));
                }
                if covariate_scheme == CovariateScheme::WithinBetween && v.contains(&1) {
                    return Err(cfg_err(
                        e.line,
                        "within_between needs cluster sizes of at least 2",
                    ));
                }
                if slopes && v != [SLOPE_TIMES.len()] {
                    return Err(cfg_err(e.line, "slopes_design has cluster size 6"));
                }
                v
            }
            None => match covariate_scheme {
                CovariateScheme::WithinBetween => ALL_SIZES.to_vec(),
                CovariateScheme::SlopesDesign => vec![SLOPE_TIMES.len()],
                CovariateScheme::HersLike => vec![4],
            },
        };
        let sigma_b = match entries.get("sigma_b") {
            Some(e) => {
                let v = real(e, "sigma_b")?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(cfg_err(e.line, "sigma_b must be non-negative"));
                }
                v
            }
            None => 1.0,
        };
        let positive = |key: &str, default: usize| -> Result<usize> {
            match entries.get(key) {
                Some(e) => {
                    let v = uint(e, key)?;
                    if v == 0 {
                        return Err(cfg_err(e.line, format!("{key} must be at least 1")));
                    }
                    Ok(v)
                }
                None => Ok(default),
            }
        };
        let n_replications = positive("n_replications", 1000)?;
        let desk_replications = positive("desk_replications", if slopes { 100 } else { 200 })?;
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
        let quad = QuadSettings {
            points: positive("quad_points", defaults.points)?,
            points_2d: positive("quad_points_2d", defaults.points_2d)?,
            adaptive: match entries.get("quad_adaptive") {
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
            },
        };
        let desk_skip_free_sizes = match entries.get("desk_skip_free_sizes") {
            Some(e) if e.value.is_empty() || e.value == "none" => Vec::new(),
            Some(e) => uints(e, "desk_skip_free_sizes")?,
            None => vec![2],
        };
        Ok(ScenarioConfig {
            m,
            cluster_sizes,
            true_betas,
            sigma_b,
            true_family_text: normalize(&family_entry.value),
            true_family,
            fitted_families,
            fitted_family_texts,
            n_replications,
            base_seed,
            covariate_scheme,
            quad,
            desk_replications,
            desk_skip_free_sizes,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn emit(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "covariate_scheme = {}", self.covariate_scheme.name());
        let _ = writeln!(
            s,
            "cluster_sizes = {}",
            join(
                &self
                    .cluster_sizes
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
            )
        );
        let _ = writeln!(
            s,
            "true_betas = {}",
            join(
                &self
                    .true_betas
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
            )
        );
        let _ = writeln!(s, "sigma_b = {:?}", self.sigma_b);
        let _ = writeln!(s, "true_family = {}", self.true_family_text);
        let _ = writeln!(s, "fitted_families = {}", join(&self.fitted_family_texts));
        let _ = writeln!(s, "n_replications = {}", self.n_replications);
        let _ = writeln!(s, "base_seed = {}", self.base_seed);
        let _ = writeln!(s, "quad_points = {}", self.quad.points);
        let _ = writeln!(s, "quad_points_2d = {}", self.quad.points_2d);
        let _ = writeln!(
            s,
            "quad_adaptive = {}",
            match self.quad.adaptive {
                AdaptiveMode::Auto => "auto",
                AdaptiveMode::On => "on",
                AdaptiveMode::Off => "off",
            }
        );
        let _ = writeln!(s, "desk_replications = {}", self.desk_replications);
        let skip: Vec<String> = self
            .desk_skip_free_sizes
            .iter()
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(
            s,
            "desk_skip_free_sizes = {}",
            if skip.is_empty() {
                "none".to_string()
            } else {
                join(&skip)
            }
        );
        s
    }

    /// Desk-scale variant: fewer replications, no free-shape fits at the
    /// listed sizes (applied when the runs are scheduled).
    pub fn desk(&self) -> ScenarioConfig {
        ScenarioConfig {
            n_replications: self.desk_replications,
            ..self.clone()
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self.covariate_scheme {
            CovariateScheme::WithinBetween => vec!["between".into(), "within".into()],
            CovariateScheme::SlopesDesign => vec!["z".into(), "t".into()],
            CovariateScheme::HersLike => vec!["visit".into(), "bmi".into(), "htn".into()],
        }
    }
}
