//! CSV formats.
//!
//! * data: `cluster,y,<covariates...>[,b0_true[,bw_true]]`
//! * fit: `# model:` / `# ranef:` comment lines, then `parameter,estimate,std_error`
//! * predictions: `cluster,b_hat[,b_true]` (`b0_hat,bw_hat[,b0_true,bw_true]` for slopes)
//! * histogram: `bin,lower,upper,count`

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::family_spec::parse_family_spec;
use crate::fit::FitResult;
use crate::model::{parse_model_formula, Cluster, Dataset, ParamVector};
use crate::optimize::Status;
use crate::predict::{HistogramBin, PredictionSet};
use crate::ranef::Effect;

const TRUTH_COLUMNS: [&str; 2] = ["b0_true", "bw_true"];

pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

/// `seed{base_seed}-{first 8 hex digits of sha256(emitted config)}`: the
/// same effective configuration always lands in the same directory.
pub fn run_dir_name(base_seed: u64, emitted_config: &str) -> String {
    let digest = Sha256::digest(emitted_config.as_bytes());
    let hex: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("seed{base_seed}-{hex}")
}

/// Starting values as `parameter,value` rows (a fit file also works: extra
/// columns and `#` lines are ignored). Every model parameter must appear.
pub fn parse_start(text: &str, names: &[String]) -> Result<Vec<f64>> {
    let mut found: HashMap<String, f64> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = split_row(line);
        if f[0] == "parameter" {
            continue;
        }
        if f.len() < 2 {
            return Err(Error::Csv(format!(
                "start file line {}: expected `parameter,value`",
                ln + 1
            )));
        }
        let v: f64 = f[1].parse().map_err(|_| {
            Error::Csv(format!("start file line {}: bad number `{}`", ln + 1, f[1]))
        })?;
        if found.insert(f[0].to_string(), v).is_some() {
            return Err(Error::Csv(format!(
                "start file line {}: duplicate parameter `{}`",
                ln + 1,
                f[0]
            )));
        }
    }
    if let Some(extra) = found.keys().find(|k| !names.contains(k)) {
        return Err(Error::Csv(format!(
            "start file names unknown parameter `{extra}`"
        )));
    }
    names
        .iter()
        .map(|n| {
            found
                .get(n)
                .copied()
                .ok_or_else(|| Error::Csv(format!("start file lacks parameter `{n}`")))
        })
        .collect()
}

fn split_row(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Csv("empty data file".into()))?;
    let cols = split_row(header.trim_start_matches('\u{feff}'));
    let pos = |name: &str| cols.iter().position(|c| c.eq_ignore_ascii_case(name));
    let ci = pos("cluster").ok_or_else(|| Error::Csv("missing `cluster` column".into()))?;
    let yi = pos("y").ok_or_else(|| Error::Csv("missing `y` column".into()))?;
    let truth_idx: Vec<usize> = TRUTH_COLUMNS.iter().filter_map(|t| pos(t)).collect();
    let cov_idx: Vec<usize> = (0..cols.len())
        .filter(|&j| j != ci && j != yi && !truth_idx.contains(&j))
        .collect();
    let covariate_names: Vec<String> = cov_idx.iter().map(|&j| cols[j].to_string()).collect();

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, (Cluster, Vec<f64>)> = HashMap::new();
    for (ln, line) in lines {
        let f = split_row(line);
        if f.len() != cols.len() {
            return Err(Error::Csv(format!(
                "line {}: {} fields, header has {}",
                ln + 1,
                f.len(),
                cols.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse::<f64>().map_err(|_| {
                Error::Csv(format!(
                    "line {}: column `{}` is not a number: `{}`",
                    ln + 1,
                    cols[j],
                    f[j]
                ))
            })
        };
        let id = f[ci].to_string();
        let y = num(yi)?;
        let row = cov_idx
            .iter()
            .map(|&j| num(j))
            .collect::<Result<Vec<f64>>>()?;
        let truth = truth_idx
            .iter()
            .map(|&j| num(j))
            .collect::<Result<Vec<f64>>>()?;
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (
                Cluster {
                    id,
                    y: Vec::new(),
                    x: Vec::new(),
                },
                truth.clone(),
            )
        });
        entry.0.y.push(y);
        entry.0.x.push(row);
    }
    if order.is_empty() {
        return Err(Error::Csv("data file has a header but no rows".into()));
    }
    let mut clusters = Vec::with_capacity(order.len());
    let mut truths = Vec::with_capacity(order.len());
    for id in &order {
        let (c, t) = by_id.remove(id).expect("cluster");
        clusters.push(c);
        truths.push(t);
    }
    let true_ranef = match truth_idx.len() {
        0 => None,
        1 => Some(truths.iter().map(|t| Effect::Scalar(t[0])).collect()),
        _ => Some(truths.iter().map(|t| Effect::Pair(t[0], t[1])).collect()),
    };
    Ok(Dataset {
        covariate_names,
        clusters,
        true_ranef,
    })
}

pub fn format_dataset(data: &Dataset) -> String {
    let mut s = String::from("cluster,y");
    for n in &data.covariate_names {
        s.push(',');
        s.push_str(n);
    }
    let truth_cols = match data.true_ranef.as_ref().and_then(|t| t.first()) {
        Some(Effect::Pair(..)) => 2,
        Some(Effect::Scalar(_)) => 1,
        None => 0,
    };
    for t in &TRUTH_COLUMNS[..truth_cols] {
        s.push(',');
        s.push_str(t);
    }
    s.push('\n');
    for (i, c) in data.clusters.iter().enumerate() {
        for (y, row) in c.y.iter().zip(&c.x) {
            let _ = write!(s, "{},{}", c.id, fmt_num(*y));
            for v in row {
                let _ = write!(s, ",{}", fmt_num(*v));
            }
            if let Some(t) = &data.true_ranef {
                for v in &t[i].components()[..truth_cols] {
                    let _ = write!(s, ",{}", fmt_num(*v));
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn format_fit(fit: &FitResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# model: {}", fit.model.formula());
    let _ = writeln!(s, "# ranef: {}", fit.model.ranef);
    s.push_str("parameter,estimate,std_error\n");
    for (i, name) in fit.names.iter().enumerate() {
        let se = fit.std_errors.as_ref().map_or(f64::NAN, |v| v[i]);
        let _ = writeln!(s, "{name},{},{}", fmt_num(fit.estimates[i]), fmt_num(se));
    }
    s
}

/// One-line status record `{"loglik": .., "converged": .., "iterations": ..}`.
pub fn format_status(fit: &FitResult) -> String {
    format!(
        "{{\"loglik\": {}, \"converged\": {}, \"iterations\": {}}}",
        if fit.loglik.is_finite() {
            fit.loglik.to_string()
        } else {
            "null".into()
        },
        fit.converged,
        fit.iterations
    )
}

/// Read back a fit file. The model is rebuilt from the comment header, so
/// only the parameter vector (not convergence data) survives the round trip.
pub fn parse_fit(text: &str) -> Result<FitResult> {
    let mut formula = None;
    let mut ranef = None;
    let mut names = Vec::new();
    let mut estimates = Vec::new();
    let mut ses = Vec::new();
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("model:") {
                formula = Some(v.trim().to_string());
            } else if let Some(v) = rest.strip_prefix("ranef:") {
                ranef = Some(v.trim().to_string());
            }
            continue;
        }
        if !header_seen {
            if split_row(line) != ["parameter", "estimate", "std_error"] {
                return Err(Error::Csv(
                    "fit file must have header `parameter,estimate,std_error`".into(),
                ));
            }
            header_seen = true;
            continue;
        }
        let f = split_row(line);
        if f.len() != 3 {
            return Err(Error::Csv(format!(
                "fit file line {}: expected 3 fields",
                ln + 1
            )));
        }
        let num = |v: &str| -> Result<f64> {
            if v == "NA" {
                Ok(f64::NAN)
            } else {
                v.parse()
                    .map_err(|_| Error::Csv(format!("fit file line {}: bad number `{v}`", ln + 1)))
            }
        };
        names.push(f[0].to_string());
        estimates.push(num(f[1])?);
        ses.push(num(f[2])?);
    }
    let formula = formula.ok_or_else(|| Error::Csv("fit file lacks `# model:` line".into()))?;
    let ranef = ranef.ok_or_else(|| Error::Csv("fit file lacks `# ranef:` line".into()))?;
    let f = parse_model_formula(&formula)?;
    let covariates = f
        .covariates
        .clone()
        .ok_or_else(|| Error::Csv("fit file model line must list covariates".into()))?;
    let model = f.resolve(&covariates, parse_family_spec(&ranef)?)?;
    if names != model.param_names() {
        return Err(Error::Csv(format!(
            "fit parameters {names:?} do not match the model's {:?}",
            model.param_names()
        )));
    }
    let theta = ParamVector::from_vec(&model, &estimates)?;
    Ok(FitResult {
        names,
        theta,
        std_errors: if ses.iter().all(|s| s.is_finite()) {
            Some(ses)
        } else {
            None
        },
        estimates,
        loglik: f64::NAN,
        converged: true,
        status: Status::Converged,
        iterations: 0,
        evals: 0,
        gradient_norm: f64::NAN,
        model,
    })
}

pub fn format_predictions(p: &PredictionSet) -> String {
    let pair = matches!(p.effects.first(), Some(Effect::Pair(..)));
    let mut s = String::from(if pair {
        "cluster,b0_hat,bw_hat"
    } else {
        "cluster,b_hat"
    });
    if p.truths.is_some() {
        s.push_str(if pair { ",b0_true,bw_true" } else { ",b_true" });
    }
    s.push('\n');
    for (i, (id, e)) in p.cluster_ids.iter().zip(&p.effects).enumerate() {
        s.push_str(id);
        for v in e.components() {
            let _ = write!(s, ",{}", fmt_num(v));
        }
        if let Some(t) = &p.truths {
            let k = e.components().len();
            let tc = t[i].components();
            for j in 0..k {
                let _ = write!(s, ",{}", fmt_num(tc.get(j).copied().unwrap_or(0.0)));
            }
        }
        s.push('\n');
    }
    s
}

pub fn format_histogram(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin,lower,upper,count\n");
    for (k, b) in bins.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            k + 1,
            fmt_num(b.lower),
            fmt_num(b.upper),
            b.count
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, OutcomeFamily, RandomStructure};
    use crate::predict::PredictMethod;

    #[test]
    fn dataset_round_trip_with_truth() {
        let text = "cluster,y,visit,bmi,b0_true\n1,0,0,27.5,0.3\n1,1,1,27.9,0.3\n2,1,0,31,-1.25\n";
        let d = parse_dataset(text).unwrap();
        assert_eq!(d.covariate_names, vec!["visit", "bmi"]);
        assert_eq!(d.clusters.len(), 2);
        assert_eq!(d.true_ranef.as_ref().unwrap()[1], Effect::Scalar(-1.25));
        assert_eq!(parse_dataset(&format_dataset(&d)).unwrap(), d);
    }

    #[test]
    fn interleaved_rows_are_grouped() {
        let d = parse_dataset("cluster,y,x\na,1,0\nb,0,0\na,0,1\n").unwrap();
        assert_eq!(d.clusters[0].y, vec![1.0, 0.0]);
        assert_eq!(d.clusters[1].id, "b");
    }

    #[test]
    fn dataset_errors() {
        assert!(parse_dataset("").is_err());
        assert!(parse_dataset("y,x\n1,2\n").is_err());
        assert!(parse_dataset("cluster,y,x\n1,1\n").is_err());
        let e = parse_dataset("cluster,y,x\n1,1,abc\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("`x`"), "{e}");
    }

    #[test]
    fn fit_round_trip() {
        let model = ModelSpec::new(
            OutcomeFamily::BernoulliLogit,
            vec!["z".into(), "t".into()],
            RandomStructure::InterceptAndSlope { slope_covariate: 1 },
            parse_family_spec("bvnormal").unwrap(),
        )
        .unwrap();
        let est = vec![-6.1, 2.0, 1.1, 0.8, 0.7, 1.2];
        let fit = FitResult {
            names: model.param_names(),
            theta: ParamVector::from_vec(&model, &est).unwrap(),
            estimates: est.clone(),
            std_errors: Some(vec![0.1; 6]),
            loglik: -100.0,
            converged: true,
            status: Status::Converged,
            iterations: 12,
            evals: 300,
            gradient_norm: 1e-6,
            model,
        };
        let back = parse_fit(&format_fit(&fit)).unwrap();
        assert_eq!(back.estimates, est);
        assert_eq!(back.model, fit.model);
        assert_eq!(
            format_status(&fit),
            "{\"loglik\": -100, \"converged\": true, \"iterations\": 12}"
        );
    }

    #[test]
    fn prediction_and_histogram_csv() {
        let p = PredictionSet {
            method: PredictMethod::Mode,
            cluster_ids: vec!["a".into()],
            effects: vec![Effect::Scalar(0.5)],
            truths: Some(vec![Effect::Scalar(1.0)]),
        };
        assert_eq!(format_predictions(&p), "cluster,b_hat,b_true\na,0.5,1\n");
        let h = format_histogram(&[HistogramBin {
            lower: 0.0,
            upper: 1.0,
            count: 3,
        }]);
        assert_eq!(h, "bin,lower,upper,count\n1,0,1,3\n");
    }
}
