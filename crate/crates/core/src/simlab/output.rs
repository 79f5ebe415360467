use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::summary::{summarize, true_values, SummaryTable};
use super::{gen_dataset, CovariateScheme, ReplicationResult, ScenarioConfig};
use crate::error::{Error, Result};
use crate::io::{fmt_num, format_dataset, format_histogram, format_predictions, run_dir_name};
use crate::predict::histogram;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutputOptions {
    pub desk: bool,
    /// Long-format replications file (one row per parameter estimate).
    pub tidy: bool,
}

/// Configuration text recorded with a run. Desk runs also skip some fits,
/// which the config alone does not show, so they carry a marker line.
pub fn effective_config_text(config: &ScenarioConfig, desk: bool) -> String {
    if desk {
        format!("{}# desk preset\n", config.desk().emit())
    } else {
        config.emit()
    }
}

pub fn output_dir_name(config: &ScenarioConfig, desk: bool) -> String {
    run_dir_name(config.base_seed, &effective_config_text(config, desk))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

pub fn format_summary(table: &SummaryTable) -> String {
    let mut s = String::from(
        "cluster_size,fitted_family,parameter,truth,bias,sd,mse,median,convergence_rate\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.cluster_size,
            csv_field(&r.family),
            r.parameter,
            fmt_num(r.truth),
            fmt_num(r.bias),
            fmt_num(r.sd),
            fmt_num(r.mse),
            fmt_num(r.median),
            fmt_num(r.convergence_rate)
        );
    }
    s
}

pub fn format_msep(table: &SummaryTable) -> String {
    let mut s = String::from("cluster_size,fitted_family,method,component,msep\n");
    for r in &table.msep {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.cluster_size,
            csv_field(&r.family),
            r.method,
            r.component,
            fmt_num(r.msep)
        );
    }
    s
}

/// Fixed-effect medians with convergence rates, one row per fitted family
/// and cluster size.
pub fn format_medians(table: &SummaryTable, fixed_effects: &[String]) -> String {
    let mut s =
        String::from("cluster_size,fitted_family,parameter,truth,median,convergence_rate,n\n");
    for r in table
        .rows
        .iter()
        .filter(|r| fixed_effects.contains(&r.parameter))
    {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.cluster_size,
            csv_field(&r.family),
            r.parameter,
            fmt_num(r.truth),
            fmt_num(r.median),
            fmt_num(r.convergence_rate),
            r.n
        );
    }
    s
}

fn param_columns(results: &[ReplicationResult]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in results {
        for n in &r.names {
            if !cols.contains(n) {
                cols.push(n.clone());
            }
        }
    }
    cols
}

pub fn format_replications(results: &[ReplicationResult]) -> String {
    let cols = param_columns(results);
    let comps = results.iter().map(|r| r.msep_mode.len()).max().unwrap_or(1);
    let mut s =
        String::from("replication,cluster_size,fitted_family,seed,converged,iterations,loglik");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    for comp in ["b0", "bw"].iter().take(comps) {
        let _ = write!(s, ",msep_mode_{comp},msep_mean_{comp}");
    }
    s.push_str(",error\n");
    for r in results {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.replication,
            r.cluster_size,
            csv_field(&r.family),
            r.seed,
            r.converged,
            r.iterations,
            fmt_num(r.loglik)
        );
        for c in &cols {
            let v = r
                .names
                .iter()
                .position(|n| n == c)
                .and_then(|j| r.estimates.get(j).copied());
            let _ = write!(s, ",{}", fmt_num(v.unwrap_or(f64::NAN)));
        }
        for k in 0..comps {
            let get = |v: &[f64]| fmt_num(v.get(k).copied().unwrap_or(f64::NAN));
            let _ = write!(s, ",{},{}", get(&r.msep_mode), get(&r.msep_mean));
        }
        let _ = writeln!(s, ",{}", csv_field(r.error.as_deref().unwrap_or("")));
    }
    s
}

pub fn format_replications_tidy(results: &[ReplicationResult]) -> String {
    let mut s =
        String::from("replication,cluster_size,fitted_family,seed,converged,parameter,estimate\n");
    for r in results {
        for (n, v) in r.names.iter().zip(&r.estimates) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{n},{}",
                r.replication,
                r.cluster_size,
                csv_field(&r.family),
                r.seed,
                r.converged,
                fmt_num(*v)
            );
        }
    }
    s
}

/// Write the run directory under `root` and return its path.
pub fn write_outputs(
    root: &Path,
    config: &ScenarioConfig,
    results: &[ReplicationResult],
    opts: OutputOptions,
) -> Result<PathBuf> {
    let dir = root.join(output_dir_name(config, opts.desk));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_file(
        &dir,
        "config.cfg",
        &effective_config_text(config, opts.desk),
    )?;
    let truths = true_values(config);
    write_file(
        &dir,
        "summary.csv",
        &format_summary(&summarize(results, &truths, false)),
    )?;
    let convergent = summarize(results, &truths, true);
    write_file(&dir, "summary_convergent.csv", &format_summary(&convergent))?;
    write_file(
        &dir,
        "msep.csv",
        &format_msep(&summarize(results, &truths, false)),
    )?;
    let reps = if opts.tidy {
        format_replications_tidy(results)
    } else {
        format_replications(results)
    };
    write_file(&dir, "replications.csv", &reps)?;
    if config.covariate_scheme == CovariateScheme::SlopesDesign {
        let mut fixed = vec!["intercept".to_string()];
        fixed.extend(config.covariate_names());
        write_file(
            &dir,
            "medians.csv",
            &format_medians(&summarize(results, &truths, false), &fixed),
        )?;
    }

    // replication 0 artifacts
    let mut sizes: Vec<usize> = results
        .iter()
        .filter(|r| r.replication == 0)
        .map(|r| r.cluster_size)
        .collect();
    sizes.dedup();
    for n in sizes {
        write_file(
            &dir,
            &format!("data_n{n}.csv"),
            &format_dataset(&gen_dataset(config, n, 0)?),
        )?;
    }
    for r in results.iter().filter(|r| r.replication == 0) {
        let Some(sets) = &r.predictions else { continue };
        for p in sets {
            let stem = format!("n{}_{}_{}", r.cluster_size, file_label(&r.family), p.method);
            write_file(
                &dir,
                &format!("predictions_{stem}.csv"),
                &format_predictions(p),
            )?;
            write_file(
                &dir,
                &format!("histogram_{stem}.csv"),
                &format_histogram(&histogram(&p.intercepts(), HISTOGRAM_BINS)),
            )?;
        }
    }
    Ok(dir)
}

/// Family label made safe for file names.
fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
